mod common;

use common::*;
use magvlt::decode::*;
use magvlt::mask::{mask_count, Schedule, Task};
use magvlt::model::Attention;
use magvlt::vocab::{is_image, is_text, MASK, PAD};

fn req(seed: u64) -> SampleRequest {
    SampleRequest {
        seed,
        ..SampleRequest::default()
    }
}

/// Independent recomputation of the image trajectory: cosine counts,
/// never more than what is still masked.
fn image_trajectory(n: usize, k_total: usize) -> Vec<usize> {
    let mut left = n;
    (1..=k_total)
        .map(|k| {
            let g = if k == k_total { 0.0 } else { (std::f64::consts::FRAC_PI_2 * k as f64 / k_total as f64).cos() };
            left = ((g * n as f64 - 1e-9).ceil().max(0.0) as usize).min(left);
            left
        })
        .collect()
}

#[test]
fn image_decode_follows_the_capped_trajectory() {
    let layout = small_layout();
    let params = small_model(Attention::Bidirectional, 41);
    let (_, enc) = small_data(10, 42);
    for seed in 0..100u64 {
        for k in [1usize, 3, 10, 20] {
            let r = SampleRequest { k_image: k, ..req(seed) };
            let out = decode_image(&params, &layout, &enc[seed as usize % 10].y, &r).unwrap();
            assert_eq!(out.trace.forwards, k);
            let got: Vec<usize> = out.trace.steps.iter().map(|s| s.image_masked_after).collect();
            assert_eq!(got, image_trajectory(layout.n_image(), k));
            // committed tokens never change afterwards
            let mut committed: Vec<Option<usize>> = vec![None; layout.n_image()];
            for s in &out.trace.steps {
                for (o, slot) in committed.iter_mut().enumerate() {
                    let id = s.tokens[layout.image_pos(o)];
                    match slot {
                        Some(prev) => assert_eq!(*prev, id),
                        None if id != MASK => *slot = Some(id),
                        None => {}
                    }
                }
                assert_eq!(s.image_frozen, committed.iter().filter(|c| c.is_some()).count());
            }
            let img = out.seq.image_tokens();
            assert!(img.iter().all(|&t| is_image(t)));
            assert_eq!(out.seq.text_tokens(), &enc[seed as usize % 10].y[..]);
        }
    }
}

#[test]
fn text_decode_follows_the_linear_trajectory() {
    let layout = small_layout();
    let params = small_model(Attention::Bidirectional, 43);
    let (_, enc) = small_data(10, 44);
    for seed in 0..100u64 {
        for k in [1usize, 4, 12] {
            let r = SampleRequest { k_text: k, ..req(seed) };
            let x = &enc[seed as usize % 10].x;
            let out = decode_text(&params, &layout, x, &r).unwrap();
            assert_eq!(out.trace.forwards, k + 1);
            let n = out.trace.predicted_len.unwrap();
            assert!((1..=layout.n_text).contains(&n));
            for (i, s) in out.trace.steps.iter().enumerate() {
                let g = Schedule::Linear.gamma((i + 1) as f64 / k as f64).unwrap();
                assert_eq!(s.text_masked_after, mask_count(g, n));
                // the image is the condition and never moves
                for o in 0..layout.n_image() {
                    assert_eq!(s.tokens[layout.image_pos(o)], x[o]);
                }
            }
            let text = out.seq.text_tokens();
            assert!(text[..n].iter().all(|&t| is_text(t)));
            assert!(text[n..].iter().all(|&t| t == PAD));
            assert!(!out.seq.ids.contains(&MASK));
        }
    }
}

#[test]
fn decoding_is_a_function_of_the_seed() {
    let layout = small_layout();
    let params = small_model(Attention::Bidirectional, 45);
    let (_, enc) = small_data(2, 46);
    let a = decode_image(&params, &layout, &enc[0].y, &req(7)).unwrap();
    let b = decode_image(&params, &layout, &enc[0].y, &req(7)).unwrap();
    assert_eq!(a, b);
    let c = decode_image(&params, &layout, &enc[0].y, &req(8)).unwrap();
    assert_ne!(a.seq, c.seq);
    let a = decode_joint(&params, &layout, &req(9)).unwrap();
    assert_eq!(a, decode_joint(&params, &layout, &req(9)).unwrap());
}

#[test]
fn inpaint_touches_only_the_region() {
    let layout = small_layout();
    let params = small_model(Attention::Bidirectional, 47);
    let (_, enc) = small_data(5, 48);
    let region = central_region(layout.grid);
    for (i, e) in enc.iter().enumerate() {
        let out = inpaint(&params, &layout, &e.x, &region, &e.y, &req(i as u64)).unwrap();
        for o in 0..layout.n_image() {
            if !region.contains(&o) {
                assert_eq!(out.seq.image_tokens()[o], e.x[o]);
            }
        }
        assert!(out.seq.image_tokens().iter().all(|&t| is_image(t)));
        let all: Vec<usize> = (0..layout.n_image()).collect();
        let full = inpaint(&params, &layout, &e.x, &all, &e.y, &req(i as u64)).unwrap();
        assert_eq!(full, decode_image(&params, &layout, &e.y, &req(i as u64)).unwrap());
    }
    assert!(inpaint(&params, &layout, &enc[0].x, &[layout.n_image()], &enc[0].y, &req(0)).is_err());
}

#[test]
fn infill_keeps_the_context_words() {
    let layout = small_layout();
    let params = small_model(Attention::Bidirectional, 49);
    let (_, enc) = small_data(8, 50);
    for (i, e) in enc.iter().enumerate() {
        let out = infill(&params, &layout, &e.x, &e.y, e.len, &req(i as u64)).unwrap();
        let span = infill_span(e.len);
        assert_eq!(out.trace.forwards, SampleRequest::default().k_text);
        for (j, (&got, &orig)) in out.seq.text_tokens().iter().zip(&e.y).enumerate() {
            if span.contains(&j) {
                assert!(is_text(got));
            } else {
                assert_eq!(got, orig);
            }
        }
        assert_eq!(out.seq.image_tokens(), &e.x[..]);
    }
    assert!(infill(&params, &layout, &enc[0].x, &enc[0].y, 0, &req(0)).is_err());
}

#[test]
fn joint_generation_ends_clean() {
    let layout = small_layout();
    let params = small_model(Attention::Bidirectional, 51);
    for seed in 0..20 {
        let out = decode_joint(&params, &layout, &req(seed)).unwrap();
        assert_eq!(out.trace.forwards, SampleRequest::default().k_joint);
        assert!(!out.seq.ids.contains(&MASK));
        let n = out.trace.predicted_len.unwrap();
        let text = out.seq.text_tokens();
        assert!(text[..n].iter().all(|&t| is_text(t)));
        assert!(text[n..].iter().all(|&t| t == PAD));
        assert!(out.seq.image_tokens().iter().all(|&t| is_image(t)));
    }
}

#[test]
fn causal_baseline_spends_one_call_per_token() {
    let layout = small_layout();
    let params = small_model(Attention::Causal, 52);
    let (_, enc) = small_data(3, 53);
    for e in &enc {
        let out = decode_ar(&params, &layout, &e.y, Task::T2I, &req(1)).unwrap();
        assert_eq!(out.forwards, layout.n_image());
        assert!(out.tokens.iter().all(|&t| is_image(t)));
        let out = decode_ar(&params, &layout, &e.x, Task::I2T, &req(1)).unwrap();
        assert!(out.forwards >= 1 && out.forwards <= layout.n_text);
        assert!(out.tokens.len() == out.forwards || out.tokens.len() + 1 == out.forwards);
        let greedy = SampleRequest { temp_image: 0.0, temp_text: 0.0, ..req(1) };
        let a = decode_ar(&params, &layout, &e.y, Task::T2I, &greedy).unwrap();
        let b = decode_ar(&params, &layout, &e.y, Task::T2I, &SampleRequest { seed: 99, ..greedy }).unwrap();
        assert_eq!(a, b);
    }
    let bidir = small_model(Attention::Bidirectional, 1);
    assert!(decode_ar(&bidir, &layout, &enc[0].y, Task::T2I, &req(0)).is_err());
    assert!(decode_image(&params, &layout, &enc[0].y, &req(0)).is_err());
}

#[test]
fn rerank_picks_the_highest_score() {
    let layout = small_layout();
    let params = small_model(Attention::Bidirectional, 54);
    let (_, enc) = small_data(2, 55);
    let outs: Vec<Vec<usize>> = (0..4)
        .map(|s| decode_image(&params, &layout, &enc[0].y, &req(s)).unwrap().seq.ids)
        .collect();
    let pos: Vec<usize> = (0..layout.n_image()).map(|i| layout.image_pos(i)).collect();
    let (best, scores) = rerank(&params, &outs, &pos).unwrap();
    assert!(scores.iter().all(|&s| s <= scores[best]));
    assert_eq!(scores.iter().position(|&s| s == scores[best]).unwrap(), best);
    // a duplicate of the winner placed first wins the tie
    let mut dup = vec![outs[best].clone()];
    dup.extend(outs.iter().cloned());
    assert_eq!(rerank(&params, &dup, &pos).unwrap().0, 0);
    assert!(rerank(&params, &[], &pos).is_err());
    // with one candidate, generation is plain decoding
    let one = generate_image(&params, &layout, &enc[0].y, &req(3)).unwrap();
    assert_eq!(one, decode_image(&params, &layout, &enc[0].y, &req(3)).unwrap());
    let many = generate_image(&params, &layout, &enc[0].y, &SampleRequest { candidates: 4, ..req(3) }).unwrap();
    assert_eq!(many.trace.forwards, SampleRequest::default().k_image);
}

#[test]
fn invalid_requests_are_refused() {
    let layout = small_layout();
    let params = small_model(Attention::Bidirectional, 56);
    let (_, enc) = small_data(1, 57);
    for bad in [
        SampleRequest { k_image: 0, ..req(0) },
        SampleRequest { candidates: 0, ..req(0) },
        SampleRequest { temp_image: -1.0, ..req(0) },
        SampleRequest { temp_image: f64::NAN, ..req(0) },
    ] {
        assert!(decode_image(&params, &layout, &enc[0].y, &bad).is_err());
    }
    let mut broken = params.clone();
    broken.tensors[0].data_mut()[0] = f64::NAN;
    assert!(decode_image(&broken, &layout, &enc[0].y, &req(0)).is_err());
}
