mod common;

use common::*;
use magvlt::decode::SampleRequest;
use magvlt::eval::*;
use magvlt::mask::Task;
use magvlt::model::{Attention, ModelParams};
use magvlt::synth::make_split;

fn f32_model(attention: Attention, seed: u64) -> ModelParams<f32> {
    small_model(attention, seed).cast()
}

fn opts(samples: usize, seed: u64) -> EvalOptions {
    EvalOptions {
        samples,
        joint: 8,
        seed,
        config_hash: "h".into(),
    }
}

#[test]
fn report_is_a_function_of_the_audit() {
    let layout = small_layout();
    let (val, _) = small_data(20, 81);
    let params = f32_model(Attention::Bidirectional, 82);
    let ev = eval_model(&params, &layout, &val, &SampleRequest::default(), &opts(20, 3)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("audit.jsonl");
    write_audit(&path, &ev.audit).unwrap();
    let back = read_audit(&path).unwrap();
    assert_eq!(back, ev.audit);
    assert_eq!(EvalReport::from_audit("h", 3, &back), ev.report);
    // recount by hand
    let i2t: Vec<_> = back.iter().filter(|r| r.task == "i2t").collect();
    let hits = i2t.iter().filter(|r| r.oracle == Some(true)).count();
    assert_eq!(ev.report.i2t_oracle, hits as f64 / i2t.len() as f64);
    let len_ok = i2t.iter().filter(|r| r.len_true.unwrap().abs_diff(r.len_pred.unwrap()) <= 1).count();
    assert_eq!(ev.report.length_accuracy, len_ok as f64 / i2t.len() as f64);
    assert_eq!(ev.report.i2t_samples, 20);
    assert_eq!(ev.report.t2i_samples, 20);
    assert_eq!(ev.report.joint_samples, 8);
    assert_eq!(ev.report.loss_samples, 20);
    assert!(parse_audit("{\"task\":\"i2t\"}").is_err());
}

#[test]
fn repeated_evaluation_is_identical() {
    let layout = small_layout();
    let (val, _) = small_data(10, 83);
    let params = f32_model(Attention::Bidirectional, 84);
    let a = eval_model(&params, &layout, &val, &SampleRequest::default(), &opts(10, 5)).unwrap();
    let b = eval_model(&params, &layout, &val, &SampleRequest::default(), &opts(10, 5)).unwrap();
    assert_eq!(a.report.to_csv(), b.report.to_csv());
    assert_eq!(a.audit, b.audit);
    assert!(eval_model(&params, &layout, &[], &SampleRequest::default(), &opts(10, 5)).is_err());
}

#[test]
fn untrained_model_is_no_better_than_shuffled_pairs() {
    let layout = small_layout();
    let (val, _) = small_data(100, 85);
    let params = f32_model(Attention::Bidirectional, 86);
    let ev = eval_model(&params, &layout, &val, &SampleRequest::default(), &EvalOptions { joint: 0, ..opts(100, 7) }).unwrap();
    let r = &ev.report;
    for (real, shuffled) in [(r.i2t_oracle, r.i2t_shuffled), (r.t2i_oracle, r.t2i_shuffled)] {
        let sigma = (rate_sigma(real, 100).powi(2) + rate_sigma(shuffled, 100).powi(2)).sqrt().max(0.01);
        assert!((real - shuffled).abs() <= 3.0 * sigma, "{real} vs {shuffled}");
    }
    assert!(r.heldout_mask_loss > 0.0 && r.heldout_mask_loss.is_finite());
}

#[test]
fn causal_models_evaluate_without_joint_samples() {
    let layout = small_layout();
    let (val, _) = small_data(6, 87);
    let params = f32_model(Attention::Causal, 88);
    let ev = eval_model(&params, &layout, &val, &SampleRequest::default(), &opts(6, 1)).unwrap();
    assert_eq!(ev.report.joint_samples, 0);
    assert_eq!(ev.report.i2t_samples, 6);
    assert_eq!(ev.report.loss_samples, 6);
}

#[test]
fn train_and_validation_scenes_are_disjoint() {
    let split = make_split(500, 100, 9, 8).unwrap();
    assert!(disjoint(&split.train, &split.val));
    assert!(!disjoint(&split.train, &split.train[..3]));
}

#[test]
fn probe_skips_self_mixes_and_counts_the_rest() {
    let layout = small_layout();
    let (mut val, _) = small_data(12, 89);
    val[1] = val[0].clone();
    let params = f32_model(Attention::Bidirectional, 90);
    let p = mixsel_probe(&params, &layout, &val, &SampleRequest::default(), 2).unwrap();
    assert_eq!(p.pairs, 6);
    assert_eq!(p.skipped, 1);
    assert_eq!(p.records.len(), 5);
    let fid = p.records.iter().filter(|r| r.selected_ok && !r.other_ok).count() as f64 / 5.0;
    assert_eq!(p.fidelity, fid);
    assert_eq!(p, mixsel_probe(&params, &layout, &val, &SampleRequest::default(), 2).unwrap());
}

#[test]
fn benchmark_counts_calls_exactly() {
    let layout = small_layout();
    let (prompts, _) = small_data(2, 91);
    let masked = f32_model(Attention::Bidirectional, 92);
    let ar = f32_model(Attention::Causal, 93);
    let cells = [BenchCell { modality: Task::T2I, k: 4 }, BenchCell { modality: Task::I2T, k: 4 }];
    let rep = bench_decode(&masked, &ar, &layout, &prompts, &cells, 5, 1, &SampleRequest::default(), "h").unwrap();
    assert_eq!(rep.timings.len(), 10);
    let t2i = &rep.cells[0];
    // call counts are summed over the prompts
    assert_eq!(t2i.masked_forwards, 4 * prompts.len());
    assert_eq!(t2i.ar_forwards, layout.n_image() * prompts.len());
    assert_eq!(t2i.invocation_ratio, layout.n_image() as f64 / 4.0);
    let i2t = &rep.cells[1];
    assert_eq!(i2t.masked_forwards, 5 * prompts.len());
    assert_eq!(rep.timing_csv().lines().count(), 11);
    assert!(bench_decode(&masked, &ar, &layout, &prompts, &cells, 4, 0, &SampleRequest::default(), "h").is_err());
    assert!(bench_decode(&masked, &masked, &layout, &prompts, &cells, 5, 0, &SampleRequest::default(), "h").is_err());
}

#[test]
fn ablation_matrix_and_variants() {
    let m = ablation_matrix();
    assert_eq!(m.len(), 18);
    for v in Variant::ALL {
        assert_eq!(Variant::parse(v.name()), Some(v));
    }
    let l = magvlt::train::Lambdas::default();
    assert_eq!(Variant::Base.lambdas(l).um, 0.0);
    assert_eq!(Variant::Base.lambdas(l).ms, 0.0);
    assert_eq!(Variant::Unroll.lambdas(l).ms, 0.0);
    assert_eq!(Variant::UnrollMixSel.lambdas(l), l);
}
