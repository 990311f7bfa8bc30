use std::sync::OnceLock;

use adadamp::analysis::{fit_line, fit_log_gap, threshold_crossing, Threshold};
use adadamp::diagnostics::{gradient_diversity, m_squared};
use adadamp::engine::{run, RunConfig, RunTrace, StoppingRule};
use adadamp::problems::{gen_linear_data, gen_multiclass_data, NoiseRule, Problem, ProblemKind};
use adadamp::schedules::{
    adadamp_batch, cap_and_decay, geodamp_batch, hsgd_batch, padadamp_batch, padadamp_warmup_batch, LrRule,
    SchedulePolicy,
};
use proptest::prelude::*;

fn problems() -> &'static [Problem] {
    static P: OnceLock<Vec<Problem>> = OnceLock::new();
    P.get_or_init(|| {
        vec![
            Problem::new(gen_linear_data(40, 3, NoiseRule::Unit, 0.0, 1).unwrap(), ProblemKind::LeastSquares, 0.0)
                .unwrap(),
            Problem::new(gen_linear_data(40, 3, NoiseRule::Unit, 0.0, 2).unwrap(), ProblemKind::LinearNet, 1e-3)
                .unwrap(),
            Problem::new(
                gen_multiclass_data(40, 3, 3, 1.5, 0.0, 3).unwrap(),
                ProblemKind::MulticlassLogistic,
                0.0,
            )
            .unwrap(),
        ]
    })
}

fn adaptive_trace() -> &'static RunTrace {
    static T: OnceLock<RunTrace> = OnceLock::new();
    T.get_or_init(|| {
        let p = &problems()[0];
        let cfg = RunConfig::new(SchedulePolicy::pada_linear(2, 1.0), LrRule::constant(0.02), StoppingRule::updates(60), 3);
        run(p, &cfg).unwrap()
    })
}

fn weights(p: &Problem, raw: &[f64]) -> Vec<f64> {
    raw.iter().cycle().take(p.num_weights()).copied().collect()
}

proptest! {
    #[test]
    fn loss_rule_is_non_increasing_in_the_gap(
        c in 1e-3f64..1e3,
        f_star in -5.0f64..5.0,
        g1 in 0.0f64..100.0,
        g2 in 0.0f64..100.0,
        cap in 1u64..100_000,
    ) {
        let (lo, hi) = if g1 <= g2 { (g1, g2) } else { (g2, g1) };
        let b_lo = adadamp_batch(f_star + lo, f_star, c, cap).unwrap();
        let b_hi = adadamp_batch(f_star + hi, f_star, c, cap).unwrap();
        prop_assert!(b_hi <= b_lo);
        prop_assert!(b_hi >= 1 && b_lo <= cap);
    }

    #[test]
    fn linear_rule_grows_by_zero_or_one_for_small_m(b0 in 1u64..1000, m in 0.0f64..=1.0, k in 0u64..100_000) {
        let step = padadamp_batch(b0, m, k + 1) - padadamp_batch(b0, m, k);
        let expected = (m * (k + 1) as f64).ceil() as u64 - (m * k as f64).ceil() as u64;
        prop_assert_eq!(step, expected);
        prop_assert!(step <= 1);
        if m == 0.0 {
            prop_assert_eq!(step, 0);
        }
    }

    #[test]
    fn cap_preserves_noise_scale(gamma in 1e-6f64..10.0, b in 1u64..1_000_000, b_max in 1u64..1_000_000) {
        let (g, bb) = cap_and_decay(gamma, b, b_max);
        prop_assert!(bb >= 1 && bb <= b_max);
        let before = gamma / b as f64;
        let after = g / bb as f64;
        prop_assert!(((after - before) / before).abs() <= 1e-15, "{before} vs {after}");
        if b < b_max {
            prop_assert_eq!((g, bb), (gamma, b));
        }
    }

    #[test]
    fn warmup_never_exceeds_linear_and_meets_it_eventually(
        b0 in 1u64..500,
        m in 0.0f64..5.0,
        k in 0u64..2000,
        tau in 1e-3f64..3.0,
    ) {
        let full = padadamp_batch(b0, m, k);
        let warm = padadamp_warmup_batch(b0, m, k, tau);
        prop_assert!(warm >= 1);
        prop_assert!(warm <= full);
        if (-(k as f64) * tau).exp() * (full as f64) < 1.0 {
            prop_assert_eq!(warm, full);
        }
    }

    #[test]
    fn schedule_outputs_are_positive_and_capped(
        b0 in 1u64..1000,
        m in 0.0f64..10.0,
        k in 0u64..10_000,
        epoch in 0.0f64..30.0,
        b_max in 1u64..10_000,
    ) {
        for b in [
            padadamp_batch(b0, m, k),
            hsgd_batch(b0, m, k),
            geodamp_batch(b0, 2.0, 1.5, epoch),
        ] {
            prop_assert!(b >= 1);
            let (_, capped) = cap_and_decay(0.1, b, b_max.max(1));
            prop_assert!(capped >= 1 && capped <= b_max);
        }
    }

    #[test]
    fn minibatch_gradient_is_size_weighted_mean(
        which in 0usize..3,
        raw in prop::collection::vec(-1.0f64..1.0, 1..8),
        a in prop::collection::vec(0usize..40, 1..12),
        b in prop::collection::vec(0usize..40, 1..12),
    ) {
        let p = &problems()[which];
        let w = weights(p, &raw);
        let ga = p.grad_minibatch(&w, &a).unwrap();
        let gb = p.grad_minibatch(&w, &b).unwrap();
        let joined: Vec<usize> = a.iter().chain(&b).copied().collect();
        let gj = p.grad_minibatch(&w, &joined).unwrap();
        let (na, nb) = (a.len() as f64, b.len() as f64);
        for j in 0..w.len() {
            let mixed = (na * ga[j] + nb * gb[j]) / (na + nb);
            prop_assert!((gj[j] - mixed).abs() <= 1e-12 * (1.0 + mixed.abs()), "{} vs {}", gj[j], mixed);
        }
    }

    #[test]
    fn diversity_paths_agree(which in 0usize..3, raw in prop::collection::vec(-1.0f64..1.0, 1..8)) {
        let p = &problems()[which];
        let w = weights(p, &raw);
        let direct = gradient_diversity(p, &w).unwrap();
        let g = p.grad_full(&w).unwrap();
        let gn: f64 = g.iter().map(|v| v * v).sum();
        let via_moments = m_squared(p, &w).unwrap() / (p.n_train() as f64 * gn);
        prop_assert!(((direct - via_moments) / via_moments).abs() <= 1e-12, "{direct} vs {via_moments}");
    }

    #[test]
    fn raising_a_lower_threshold_never_reaches_it_sooner(t1 in 0.0f64..200.0, t2 in 0.0f64..200.0) {
        // train loss falls, so "loss at most t" with a smaller t is harder.
        let trace = adaptive_trace();
        let (easy, hard) = if t1 >= t2 { (t1, t2) } else { (t2, t1) };
        let e = threshold_crossing(trace, "x", Threshold::TrainLossAtMost(easy)).unwrap();
        let h = threshold_crossing(trace, "x", Threshold::TrainLossAtMost(hard)).unwrap();
        if h.reached {
            prop_assert!(e.reached);
            prop_assert!(e.updates_to_target <= h.updates_to_target);
        }
    }

    #[test]
    fn fits_recover_exact_parameters(
        slope in -3.0f64..3.0,
        intercept in -10.0f64..10.0,
        n in 3usize..50,
        rate in 1e-3f64..0.5,
        gap0 in 1.0f64..1e3,
        f_star in -2i32..=2,
    ) {
        // gaps stay well above the resolution of f64 near F*
        let n = n.min(20);
        let f_star = f64::from(f_star);
        let x: Vec<f64> = (0..n).map(|i| i as f64 * 0.7).collect();
        let y: Vec<f64> = x.iter().map(|v| slope * v + intercept).collect();
        let (s, i, r2) = fit_line(&x, &y).unwrap();
        prop_assert!((s - slope).abs() <= 1e-6 * slope.abs().max(1.0));
        prop_assert!((i - intercept).abs() <= 1e-6 * intercept.abs().max(1.0));
        prop_assert!(r2 > 1.0 - 1e-9);

        let points: Vec<(u64, f64)> =
            (0..n as u64).map(|k| (k, f_star + gap0 * (1.0 - rate).powi(k as i32))).collect();
        let fit = fit_log_gap(&points, f_star).unwrap();
        prop_assert!((fit.contraction_rate() - rate).abs() <= 1e-6 * rate, "{} vs {rate}", fit.contraction_rate());
    }
}

#[test]
fn threshold_trace_actually_crosses() {
    // keeps the monotonicity property from holding vacuously
    let t = adaptive_trace();
    let mid = (t.initial_train_loss + t.final_train_loss().unwrap()) / 2.0;
    assert!(threshold_crossing(t, "x", Threshold::TrainLossAtMost(mid)).unwrap().reached);
}
