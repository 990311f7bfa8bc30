//! The mini-batch SGD loop with pluggable batch-size schedules and exact
//! accounting of model updates, gradient computations and epochs.

mod optimizer;
mod trace;

pub use optimizer::OptimizerState;
pub use trace::{read_trace_csv, Record, RunStatus, RunTrace, Snapshot, TraceSummary, TRACE_HEADER};
pub(crate) use trace::fmt_f64;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{config_err, Error, Result};
use crate::problems::{norm_sq, MetricKind, Problem};
use crate::schedules::{
    adadamp_batch, cap_and_decay, gradnorm_batch, lr_at, LrRule, PostCapDecay, ScheduleKind,
    SchedulePolicy, MAX_BATCH,
};

/// How minibatch indices are drawn.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sampling {
    /// Uniform i.i.d. draws with repetition.
    #[default]
    WithReplacement,
    /// A fresh permutation every pass; batches are consecutive slices of it.
    ShufflePerEpoch,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerConfig {
    #[serde(default)]
    pub momentum: f64,
    #[serde(default)]
    pub nesterov: bool,
    #[serde(default)]
    pub adagrad: bool,
    #[serde(default)]
    pub adagrad_eps: f64,
    /// Start iterate averaging after this many updates.
    #[serde(default)]
    pub asgd_t0_updates: Option<u64>,
    /// Decay added by the optimizer. Must stay zero when the problem already
    /// carries a ridge term.
    #[serde(default)]
    pub weight_decay: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self::plain()
    }
}

impl OptimizerConfig {
    pub fn plain() -> Self {
        Self {
            momentum: 0.0,
            nesterov: false,
            adagrad: false,
            adagrad_eps: 0.0,
            asgd_t0_updates: None,
            weight_decay: 0.0,
        }
    }

    pub fn nesterov(momentum: f64) -> Self {
        Self {
            momentum,
            nesterov: true,
            ..Self::plain()
        }
    }

    pub fn adagrad(eps: f64) -> Self {
        Self {
            adagrad: true,
            adagrad_eps: eps,
            ..Self::plain()
        }
    }

    pub fn averaged(t0: u64) -> Self {
        Self {
            asgd_t0_updates: Some(t0),
            ..Self::plain()
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StoppingRule {
    #[serde(default)]
    pub max_updates: Option<u64>,
    #[serde(default)]
    pub max_epochs: Option<f64>,
    /// Stop once the evaluated train loss is at or below this.
    #[serde(default)]
    pub target_train_loss: Option<f64>,
    /// Stop once the evaluated test metric reaches this (at or below for a
    /// test loss, at or above for an accuracy).
    #[serde(default)]
    pub target_test_metric: Option<f64>,
    /// Stop once `‖∇F‖²` falls to this value (checked on evaluation updates).
    #[serde(default)]
    pub grad_norm_floor: Option<f64>,
}

impl StoppingRule {
    pub fn updates(max_updates: u64) -> Self {
        Self {
            max_updates: Some(max_updates),
            ..Default::default()
        }
    }

    pub fn epochs(max_epochs: f64) -> Self {
        Self {
            max_epochs: Some(max_epochs),
            ..Default::default()
        }
    }

    fn validate(&self) -> Result<()> {
        if self.max_updates.is_none()
            && self.max_epochs.is_none()
            && self.target_train_loss.is_none()
            && self.target_test_metric.is_none()
            && self.grad_norm_floor.is_none()
        {
            return config_err("stopping rule sets no bound");
        }
        Ok(())
    }
}

/// Everything a run needs besides the problem.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub policy: SchedulePolicy,
    pub lr: LrRule,
    pub optimizer: OptimizerConfig,
    pub stop: StoppingRule,
    pub seed: u64,
    pub sampling: Sampling,
    /// Evaluate train loss and test metric every this many updates. The last
    /// update is always evaluated.
    pub eval_every: u64,
    /// Keep a copy of the weights every this many updates (and at `k = 0`).
    pub snapshot_every: Option<u64>,
    /// Starting point; drawn from the problem's initializer when absent.
    pub init: Option<Vec<f64>>,
    /// Abort once the train loss exceeds this multiple of the initial loss.
    pub divergence_factor: f64,
}

impl RunConfig {
    pub fn new(policy: SchedulePolicy, lr: LrRule, stop: StoppingRule, seed: u64) -> Self {
        Self {
            policy,
            lr,
            optimizer: OptimizerConfig::plain(),
            stop,
            seed,
            sampling: Sampling::WithReplacement,
            eval_every: 1,
            snapshot_every: None,
            init: None,
            divergence_factor: 1e6,
        }
    }
}

struct Sampler {
    mode: Sampling,
    n: usize,
    perm: Vec<usize>,
    cursor: usize,
}

impl Sampler {
    fn new(mode: Sampling, n: usize) -> Self {
        Self {
            mode,
            n,
            perm: (0..n).collect(),
            cursor: n,
        }
    }

    fn fill(&mut self, b: usize, rng: &mut ChaCha8Rng, out: &mut Vec<usize>) {
        out.clear();
        match self.mode {
            Sampling::WithReplacement => {
                out.extend((0..b).map(|_| rng.random_range(0..self.n)));
            }
            Sampling::ShufflePerEpoch => {
                while out.len() < b {
                    if self.cursor == self.n {
                        self.perm.shuffle(rng);
                        self.cursor = 0;
                    }
                    let take = (b - out.len()).min(self.n - self.cursor);
                    out.extend_from_slice(&self.perm[self.cursor..self.cursor + take]);
                    self.cursor += take;
                }
            }
        }
    }
}

/// Runs mini-batch SGD on `problem`.
///
/// Each update: (adaptive rules, every `d_relax` updates) evaluate the full
/// loss or gradient and recompute the batch size; compute the step; apply the
/// cap; draw indices; average their gradients; step the optimizer; record.
/// A batch equal to `n` uses every training index once, in order, so a
/// constant batch of `n` is gradient descent. Adaptive rules without a cap
/// are clamped to `n`.
pub fn run(problem: &Problem, cfg: &RunConfig) -> Result<RunTrace> {
    cfg.policy.validate()?;
    cfg.lr.validate()?;
    cfg.stop.validate()?;
    if cfg.eval_every == 0 {
        return config_err("eval_every must be at least 1");
    }
    if problem.weight_decay() > 0.0 && cfg.optimizer.weight_decay > 0.0 {
        return config_err("weight decay is set on both the problem and the optimizer");
    }
    if !(0.0..1.0).contains(&cfg.optimizer.momentum) {
        return config_err(format!("momentum must lie in [0, 1), got {}", cfg.optimizer.momentum));
    }

    let n = problem.n_train();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let w0 = match &cfg.init {
        Some(w) => w.clone(),
        None => problem.init_weights(&mut rng),
    };
    problem.check_weights(&w0)?;
    let mut state = OptimizerState::new(w0, rng);

    let initial_loss = problem.loss_full(&state.weights)?;
    let initial_metric = problem.test_metric(&state.weights)?;
    let policy = &cfg.policy;

    let mut grad_comps_eval: u64 = 0;
    let c = match policy.kind {
        ScheduleKind::AdaLoss => Some(match policy.c {
            Some(c) => c,
            None => {
                grad_comps_eval += n as u64;
                let gap = initial_loss - policy.f_star;
                if !(gap > 0.0) {
                    return Err(Error::BetterThanOptimum {
                        loss: initial_loss,
                        f_star: policy.f_star,
                    });
                }
                policy.b0 as f64 * gap
            }
        }),
        ScheduleKind::AdaGradNorm => Some(match policy.c {
            Some(c) => c,
            None => {
                grad_comps_eval += n as u64;
                let g = norm_sq(&problem.grad_full(&state.weights)?);
                if g == 0.0 {
                    return Err(Error::Stationary);
                }
                policy.b0 as f64 * g
            }
        }),
        _ => None,
    };

    let metric_kind = problem.metric_kind();
    let mut trace = RunTrace {
        records: Vec::new(),
        status: RunStatus::MaxUpdates,
        sampling: cfg.sampling,
        n_train: n,
        seed: cfg.seed,
        metric_kind,
        initial_train_loss: initial_loss,
        initial_test_metric: initial_metric,
        c,
        crossover_update: None,
        snapshots: Vec::new(),
        final_weights: Vec::new(),
        averaged_weights: None,
    };
    if cfg.snapshot_every.is_some() {
        trace.snapshots.push(Snapshot {
            k: 0,
            weights: state.weights.clone(),
        });
    }

    let mut sampler = Sampler::new(cfg.sampling, n);
    let mut indices = Vec::new();
    let mut grad = vec![0.0; problem.num_weights()];
    let mut grad_comps_opt: u64 = 0;
    // Examples the uncapped schedule would have consumed; drives the
    // geometric schedule so capping never shifts its clock.
    let mut nominal_examples: f64 = 0.0;
    let mut requested: u64 = policy.b0;
    // F(w_k) of the raw iterate, if already known.
    let mut known_loss: Option<(u64, f64)> = Some((0, initial_loss));
    let mut k_at_cap: Option<u64> = None;

    loop {
        let k = state.k;
        let epoch = grad_comps_opt as f64 / n as f64;

        // batch size requested by the schedule
        match policy.kind {
            ScheduleKind::AdaLoss if k % policy.d_relax == 0 => {
                grad_comps_eval += n as u64;
                let loss = match known_loss {
                    Some((kk, l)) if kk == k => l,
                    _ => problem.loss_full(&state.weights)?,
                };
                let cap = if policy.b_max.is_some() { MAX_BATCH } else { n as u64 };
                requested = adadamp_batch(loss, policy.f_star, c.expect("set"), cap)?;
            }
            ScheduleKind::AdaGradNorm if k % policy.d_relax == 0 => {
                grad_comps_eval += n as u64;
                let g = norm_sq(&problem.grad_full(&state.weights)?);
                match gradnorm_batch(g, c.expect("set")) {
                    Ok(b) => requested = b,
                    Err(Error::Stationary) => {
                        trace.status = RunStatus::Converged;
                        break;
                    }
                    Err(e) => return Err(e),
                }
            }
            ScheduleKind::AdaLoss | ScheduleKind::AdaGradNorm => {}
            _ if k % policy.dwell == 0 => {
                let clock = nominal_examples / n as f64;
                requested = policy.passive_batch(k, clock).expect("passive");
            }
            _ => {}
        }
        nominal_examples += requested as f64;

        let mut gamma = lr_at(&cfg.lr, k, epoch);
        let mut batch = requested;
        if let Some(b_max) = policy.b_max {
            if requested >= b_max && trace.crossover_update.is_none() {
                trace.crossover_update = Some(k + 1);
            }
            if policy.kind == ScheduleKind::HsgdQuadratic
                && policy.post_cap == PostCapDecay::Linear
                && requested >= b_max
            {
                let k_max = *k_at_cap.get_or_insert(k.max(1)) as f64;
                gamma *= k_max / (k_max + policy.m * (k as f64 - k_max));
                batch = b_max;
            } else {
                (gamma, batch) = cap_and_decay(gamma, requested, b_max);
            }
        }
        if policy.is_adaptive() {
            batch = batch.min(n as u64);
        }

        let b = batch as usize;
        if b == n {
            problem.accumulate(&state.weights, 0..n, n, &mut grad);
        } else {
            sampler.fill(b, &mut state.rng, &mut indices);
            problem.accumulate(&state.weights, indices.iter().copied(), b, &mut grad);
        }

        let opt = &cfg.optimizer;
        if opt.adagrad {
            if opt.weight_decay > 0.0 {
                for (g, w) in grad.iter_mut().zip(&state.weights) {
                    *g += opt.weight_decay * w;
                }
            }
            state.adagrad_step(&grad, gamma, opt.adagrad_eps)?;
        } else {
            state.sgd_step(&grad, gamma, opt.momentum, opt.nesterov, opt.weight_decay)?;
        }
        if let Some(t0) = opt.asgd_t0_updates {
            state.asgd_update_average(t0);
        }
        grad_comps_opt += batch;
        let k = state.k;
        let epoch = grad_comps_opt as f64 / n as f64;

        let out_of_budget = cfg.stop.max_updates.is_some_and(|m| k >= m)
            || cfg.stop.max_epochs.is_some_and(|m| epoch >= m);
        let finite = state.weights.iter().all(|v| v.is_finite());
        let evaluate = k % cfg.eval_every == 0 || out_of_budget || !finite;

        let mut record = Record {
            k,
            epoch,
            batch_size: batch,
            lr: gamma,
            train_loss: None,
            test_metric: None,
            grad_comps_opt,
            grad_comps_eval,
        };
        let mut stop: Option<RunStatus> = None;
        if evaluate {
            if !finite {
                record.train_loss = Some(f64::NAN);
                trace.records.push(record);
                return Err(diverged(trace, &state, k, f64::NAN));
            }
            let raw_loss = problem.loss_full(&state.weights)?;
            known_loss = Some((k, raw_loss));
            let reported = if opt.asgd_t0_updates.is_some() {
                &state.average
            } else {
                &state.weights
            };
            let loss = if std::ptr::eq(reported, &state.weights) {
                raw_loss
            } else {
                problem.loss_full(reported)?
            };
            let metric = problem.test_metric(reported)?;
            record.train_loss = Some(loss);
            record.test_metric = metric;
            if !raw_loss.is_finite() || raw_loss > cfg.divergence_factor * initial_loss {
                trace.records.push(record);
                return Err(diverged(trace, &state, k, raw_loss));
            }
            if cfg.stop.target_train_loss.is_some_and(|t| loss <= t) {
                stop = Some(RunStatus::TargetReached);
            }
            if let (Some(t), Some(m)) = (cfg.stop.target_test_metric, metric) {
                let hit = match metric_kind {
                    MetricKind::TestLoss => m <= t,
                    MetricKind::Accuracy => m >= t,
                };
                if hit {
                    stop = Some(RunStatus::TargetReached);
                }
            }
            if let Some(floor) = cfg.stop.grad_norm_floor {
                if norm_sq(&problem.grad_full(&state.weights)?) <= floor {
                    stop = Some(RunStatus::Converged);
                }
            }
        }
        trace.records.push(record);
        if let Some(every) = cfg.snapshot_every {
            if every > 0 && k % every == 0 {
                trace.snapshots.push(Snapshot {
                    k,
                    weights: state.weights.clone(),
                });
            }
        }
        if stop.is_none() {
            if cfg.stop.max_updates.is_some_and(|m| k >= m) {
                stop = Some(RunStatus::MaxUpdates);
            } else if cfg.stop.max_epochs.is_some_and(|m| epoch >= m) {
                stop = Some(RunStatus::MaxEpochs);
            }
        }
        if let Some(s) = stop {
            trace.status = s;
            break;
        }
    }

    trace.final_weights = state.weights.clone();
    if cfg.optimizer.asgd_t0_updates.is_some() {
        trace.averaged_weights = Some(state.average.clone());
    }
    Ok(trace)
}

fn diverged(mut trace: RunTrace, state: &OptimizerState, k: u64, loss: f64) -> Error {
    trace.status = RunStatus::Diverged;
    trace.final_weights = state.weights.clone();
    Error::Diverged {
        k,
        loss,
        partial: Box::new(trace),
    }
}

/// Geometric batch growth that turns into equal-factor step decay once the
/// cap is reached. `γ_k / B_k` matches the uncapped schedule update by
/// update; the trace marks the crossover.
pub fn run_geodamp_lr_mirror(problem: &Problem, cfg: &RunConfig) -> Result<RunTrace> {
    if cfg.policy.kind != ScheduleKind::Geometric {
        return config_err("run_geodamp_lr_mirror needs a geometric schedule");
    }
    run(problem, cfg)
}
