mod common;

use common::*;
use magvlt::mask::*;
use magvlt::model::{Attention, ModelParams};
use magvlt::train::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::f64::consts::FRAC_PI_2;

/// Mean of `γ(r')` for `r' = r + (1 − r)u`, `u` uniform: the average of γ over `[r, 1]`.
fn expected_gamma(s: Schedule, r: f64) -> f64 {
    match s {
        Schedule::Cosine => (1.0 - (FRAC_PI_2 * r).sin()) / ((1.0 - r) * FRAC_PI_2),
        Schedule::Linear => (1.0 - r) / 2.0,
    }
}

#[test]
fn remask_ratio_matches_its_analytic_mean() {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    for s in [Schedule::Cosine, Schedule::Linear] {
        for r in [0.0, 0.2, 0.5, 0.8] {
            let n = 200_000;
            let mean: f64 = (0..n)
                .map(|_| s.gamma(unroll_remask(&mut rng, r, 64, 64, s).r).unwrap())
                .sum::<f64>()
                / n as f64;
            let want = expected_gamma(s, r);
            assert!((mean - want).abs() / want < 0.01, "{s:?} r={r}: {mean} vs {want}");
        }
    }
}

#[test]
fn remask_count_follows_the_drawn_ratio() {
    let mut rng = ChaCha8Rng::seed_from_u64(32);
    for _ in 0..5000 {
        let r = rand::Rng::gen::<f64>(&mut rng);
        let prev = mask_count(Schedule::Linear.gamma(r).unwrap(), 12);
        let rm = unroll_remask(&mut rng, r, 12, prev, Schedule::Linear);
        let want = mask_count(Schedule::Linear.gamma(rm.r).unwrap(), 12).min(prev.saturating_sub(1));
        assert_eq!(rm.positions.len(), want);
        assert!(rm.positions.windows(2).all(|w| w[0] < w[1]));
    }
}

#[test]
fn task_frequencies_match_weights() {
    let w = TaskWeights::default();
    let mut rng = ChaCha8Rng::seed_from_u64(33);
    let n = 10_000;
    let mut counts = [0usize; 3];
    for _ in 0..n {
        let t = w.sample(&mut rng);
        counts[Task::ALL.iter().position(|&x| x == t).unwrap()] += 1;
    }
    for (t, &c) in Task::ALL.iter().zip(&counts) {
        let p = w.probability(*t);
        let sigma = (n as f64 * p * (1.0 - p)).sqrt();
        assert!((c as f64 - n as f64 * p).abs() <= 3.0 * sigma, "{t:?}: {c}");
    }
    assert_eq!(TaskWeights::parse("8:1:1").unwrap(), w);
    assert!(TaskWeights::parse("0:0:0").is_err());
    assert!(TaskWeights::parse("1:-1:1").is_err());
    assert!(TaskWeights::parse("1:1").is_err());
}

#[test]
fn term_indicators_per_task() {
    let l = Lambdas::default();
    let t = active_terms(Task::T2I, &l);
    assert!(t.mask && !t.length && t.unroll && t.mixsel);
    let t = active_terms(Task::I2T, &l);
    assert!(t.mask && t.length && t.unroll && t.mixsel);
    let t = active_terms(Task::IT2IT, &l);
    assert!(t.mask && t.length && !t.unroll && t.mixsel);
    let off = Lambdas { tl: 0.0, um: 0.0, ms: 0.0 };
    for task in Task::ALL {
        let t = active_terms(task, &off);
        assert!(t.mask && !t.length && !t.unroll && !t.mixsel);
    }
}

#[test]
fn train_steps_report_exactly_the_active_terms() {
    let (_, data) = small_data(40, 34);
    let tc = small_train_config(Attention::Bidirectional, 4, 60);
    let mut tr = Trainer::new(tc.clone(), ModelParams::init(tc.model, 1).unwrap()).unwrap();
    let mut seen = [false; 3];
    for _ in 0..60 {
        let r = tr.train_step(&data).unwrap();
        let t = active_terms(r.task, &tc.lambdas);
        assert_eq!(r.length.is_some(), t.length);
        assert_eq!(r.unroll.is_some(), t.unroll);
        assert_eq!(r.mixsel.is_some(), t.mixsel);
        assert_eq!(r.total, r.composed(&tc.lambdas));
        seen[Task::ALL.iter().position(|&x| x == r.task).unwrap()] = true;
    }
    assert_eq!(seen, [true; 3]);
}
