//! One line per acceptance criterion: `PASS`, `FAIL` or `SKIPPED`.
//!
//! Criteria 5 and 7 at their stated scale only run with
//! `MAGVLT_ACCEPT_FULL=1`; otherwise they print `SKIPPED` and a clearly
//! labeled reduced-scale run stands in for part of criterion 5.

mod common;

use common::*;
use magvlt::config::RunConfig;
use magvlt::decode::*;
use magvlt::eval::*;
use magvlt::mask::*;
use magvlt::model::*;
use magvlt::synth::*;
use magvlt::train::*;
use magvlt::vocab::{is_image, is_text, Layout, VocabFile, MASK, PAD, VOCAB_SIZE};
use magvlt_ndnum::Tape;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::time::Instant;

enum Outcome {
    Pass(String),
    Fail(String),
    Skipped(String),
}

type Checked = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        if !$cond {
            return Err(format!($($msg)+));
        }
    };
}

fn ok<T, E: std::fmt::Display>(r: std::result::Result<T, E>) -> Result<T, String> {
    r.map_err(|e| e.to_string())
}

fn full_scale() -> bool {
    std::env::var("MAGVLT_ACCEPT_FULL").is_ok_and(|v| v == "1")
}

// ---- 1: finite differences ---------------------------------------------------

struct GradStats {
    checked: usize,
    zeros: usize,
    worst: f64,
}

/// Five-point central differences of `term_value` against the tape gradient
/// at 100 coordinates with a nonzero gradient and up to 20 with none.
fn gradcheck_term(params: &mut ModelParams<f64>, layout: &Layout, tb: &TermBatch, smoothing: f64, seed: u64) -> Result<GradStats, String> {
    const H: f64 = 1e-4;
    let mut tape = Tape::new();
    let vars = params.register(&mut tape, true);
    let loss = ok(term_loss(&mut tape, &vars, &params.config, layout.bot(), tb, smoothing))?;
    let g = ok(tape.backward(loss))?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(&params.tensors)
        .map(|(&v, t)| g.get(v).map_or(vec![0.0; t.len()], |x| x.data().to_vec()))
        .collect();
    let mut nonzero = Vec::new();
    let mut zero = Vec::new();
    for (i, a) in analytic.iter().enumerate() {
        for (j, &v) in a.iter().enumerate() {
            if v != 0.0 { nonzero.push((i, j)) } else { zero.push((i, j)) }
        }
    }
    ensure!(nonzero.len() >= 100, "only {} coordinates carry gradient", nonzero.len());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let picks = choose_positions(&mut rng, nonzero.len(), 100);
    let zero_picks = choose_positions(&mut rng, zero.len(), zero.len().min(20));
    let mut eval = |i: usize, j: usize, d: f64| -> Result<f64, String> {
        let keep = params.tensors[i].data()[j];
        params.tensors[i].data_mut()[j] = keep + d;
        let v = ok(term_value(params, layout, tb, smoothing));
        params.tensors[i].data_mut()[j] = keep;
        v
    };
    let mut numeric = |i: usize, j: usize| -> Result<f64, String> {
        let (p2, p1, m1, m2) = (eval(i, j, 2.0 * H)?, eval(i, j, H)?, eval(i, j, -H)?, eval(i, j, -2.0 * H)?);
        Ok((-p2 + 8.0 * p1 - 8.0 * m1 + m2) / (12.0 * H))
    };
    let mut worst = 0.0f64;
    for &k in &picks {
        let (i, j) = nonzero[k];
        let a = analytic[i][j];
        let n = numeric(i, j)?;
        let rel = (a - n).abs() / a.abs().max(n.abs()).max(1e-6);
        ensure!(rel <= 1e-4, "tensor {i}[{j}]: tape {a:e}, differences {n:e}, rel {rel:e}");
        worst = worst.max(rel);
    }
    for &k in &zero_picks {
        let (i, j) = zero[k];
        let n = numeric(i, j)?;
        ensure!(n.abs() <= 1e-9, "tensor {i}[{j}] has no tape gradient but differences give {n:e}");
    }
    Ok(GradStats { checked: picks.len(), zeros: zero_picks.len(), worst })
}

fn gradient_correctness() -> Checked {
    let layout = small_layout();
    let (_, enc) = small_data(4, 101);
    let items: Vec<&Encoded> = enc.iter().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(102);
    let plans = |rng: &mut ChaCha8Rng, task: Task| -> Vec<MaskPlan> {
        items.iter().map(|e| sample_training_mask(rng, layout.n_image(), e.len, task, Schedules::default())).collect()
    };
    let mut params = small_model(Attention::Bidirectional, 103);
    let mut terms: Vec<(String, TermBatch, f64)> = Vec::new();
    for task in Task::ALL {
        let p = plans(&mut rng, task);
        terms.push((format!("mask/{}", task.name()), ok(mask_term(&layout, &items, task, &p))?, 0.1));
    }
    for task in [Task::I2T, Task::IT2IT] {
        let p = plans(&mut rng, task);
        terms.push((format!("length/{}", task.name()), ok(length_term(&layout, &items, task, &p))?, 0.0));
    }
    for task in [Task::T2I, Task::I2T] {
        let p = plans(&mut rng, task);
        let first_in = ok(mask_term(&layout, &items, task, &p))?;
        let first = ok(params.infer(&first_in.ids, first_in.batch, None))?;
        let (tb, _) = ok(unroll_term(&layout, &items, task, &p, &first_in, &first, Schedules::default(), &mut rng))?;
        terms.push((format!("unroll/{}", task.name()), tb, 0.1));
    }
    for task in Task::ALL {
        let (pairs, choices, p) = ok(sample_mixsel(&mut rng, &layout, &items, task, Schedules::default()))?;
        let pairs: Vec<(&Encoded, &Encoded)> = pairs.iter().map(|&(a, b)| (items[a], items[b])).collect();
        terms.push((format!("mixsel/{}", task.name()), ok(mixsel_term(&layout, &pairs, task, &choices, &p))?, 0.1));
    }
    let mut lines = Vec::new();
    let mut total = 0;
    for (k, (name, tb, smoothing)) in terms.iter().enumerate() {
        let s = gradcheck_term(&mut params, &layout, tb, *smoothing, 200 + k as u64).map_err(|e| format!("{name}: {e}"))?;
        total += s.checked;
        lines.push(format!("{name} {}+{}z {:.1e}", s.checked, s.zeros, s.worst));
    }
    let mut ar = small_model(Attention::Causal, 104);
    for dir in [Task::T2I, Task::I2T] {
        let al = ok(ar_layout(&layout, dir))?;
        let tb = ok(ar_term(&layout, &items, dir, 0.9, 0.1))?;
        let s = gradcheck_term(&mut ar, &al, &tb, 0.0, 300).map_err(|e| format!("ar/{}: {e}", dir.name()))?;
        total += s.checked;
        lines.push(format!("ar/{} {}+{}z {:.1e}", dir.name(), s.checked, s.zeros, s.worst));
    }
    Ok(format!("{total} coordinates, worst rel err per term: {}", lines.join(", ")))
}

// ---- 2: locality -------------------------------------------------------------

fn logit_grads(params: &ModelParams<f64>, layout: &Layout, tb: &TermBatch) -> Result<Vec<f64>, String> {
    let mut tape = Tape::new();
    let vars = params.register(&mut tape, true);
    let lp = tb.length_targets.as_ref().map(|_| layout.bot());
    let out = ok(forward(&mut tape, &vars, &params.config, &tb.ids, tb.batch, lp))?;
    tape.retain_grad(out.logits);
    let loss = ok(loss_on(&mut tape, &out, tb, 0.1))?;
    let g = ok(tape.backward(loss))?;
    Ok(g.get(out.logits).map_or(vec![0.0; tb.ids.len() * VOCAB_SIZE], |t| t.data().to_vec()))
}

fn loss_locality() -> Checked {
    let layout = small_layout();
    let params = small_model(Attention::Bidirectional, 111);
    let mut rows_checked = 0usize;
    for seed in 0..10u64 {
        let (_, enc) = small_data(6, 112 + seed);
        let items: Vec<&Encoded> = enc.iter().collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for task in Task::ALL {
            let plans: Vec<MaskPlan> = items
                .iter()
                .map(|e| sample_training_mask(&mut rng, layout.n_image(), e.len, task, Schedules::default()))
                .collect();
            let tb = ok(mask_term(&layout, &items, task, &plans))?;
            let g = logit_grads(&params, &layout, &tb)?;
            for (row, chunk) in g.chunks(VOCAB_SIZE).enumerate() {
                if !tb.rows.contains(&row) {
                    ensure!(
                        chunk.iter().all(|v| v.to_bits() == 0),
                        "{} seed {seed}: unmasked row {row} has gradient",
                        task.name()
                    );
                    rows_checked += 1;
                }
            }
        }
    }
    Ok(format!("{rows_checked} unmasked logit rows bitwise zero over 3 tasks x 10 seeds"))
}

// ---- 3: schedules and decoding -----------------------------------------------

/// Cosine counts recomputed from scratch, never above what is still masked.
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

/// Once a position leaves MASK it keeps its token.
fn frozen_stay_frozen(trace: &DecodeTrace, positions: &[usize]) -> bool {
    let mut seen: Vec<Option<usize>> = vec![None; positions.len()];
    for s in &trace.steps {
        for (slot, &p) in seen.iter_mut().zip(positions) {
            let id = s.tokens[p];
            match slot {
                Some(prev) if *prev != id => return false,
                None if id != MASK => *slot = Some(id),
                _ => {}
            }
        }
    }
    true
}

fn decode_invariants() -> Checked {
    for s in [Schedule::Cosine, Schedule::Linear] {
        ensure!(ok(s.gamma(0.0))? == 1.0 && ok(s.gamma(1.0))? == 0.0, "{s:?} boundary values");
    }
    let layout = small_layout();
    let params = small_model(Attention::Bidirectional, 121);
    let (_, enc) = small_data(10, 122);
    let image_pos: Vec<usize> = (0..layout.n_image()).map(|o| layout.image_pos(o)).collect();
    let ks = [1usize, 3, 10, 20];
    for seed in 0..100u64 {
        let e = &enc[seed as usize % enc.len()];
        let k = ks[seed as usize % ks.len()];
        let req = SampleRequest { seed, k_image: k, k_text: k, ..SampleRequest::default() };

        let out = ok(decode_image(&params, &layout, &e.y, &req))?;
        let got: Vec<usize> = out.trace.steps.iter().map(|s| s.image_masked_after).collect();
        ensure!(got == image_trajectory(layout.n_image(), k), "seed {seed}: image trajectory {got:?}");
        ensure!(frozen_stay_frozen(&out.trace, &image_pos), "seed {seed}: a frozen image token changed");
        ensure!(out.seq.image_tokens().iter().all(|&t| is_image(t)), "seed {seed}: image left unfinished");
        ensure!(!out.seq.ids.contains(&MASK), "seed {seed}: MASK left after image decoding");

        let out = ok(decode_text(&params, &layout, &e.x, &req))?;
        let n = out.trace.predicted_len.ok_or("no predicted length")?;
        for (i, s) in out.trace.steps.iter().enumerate() {
            let want = mask_count(1.0 - (i + 1) as f64 / k as f64, n);
            ensure!(s.text_masked_after == want, "seed {seed}: text step {i} has {} masked, want {want}", s.text_masked_after);
            ensure!(image_pos.iter().zip(&e.x).all(|(&p, &x)| s.tokens[p] == x), "seed {seed}: text decoding moved the image");
        }
        let text = out.seq.text_tokens();
        ensure!(text[..n].iter().all(|&t| is_text(t)) && text[n..].iter().all(|&t| t == PAD), "seed {seed}: caption shape");
        ensure!(!out.seq.ids.contains(&MASK), "seed {seed}: MASK left after text decoding");

        let out = ok(decode_joint(&params, &layout, &req))?;
        ensure!(frozen_stay_frozen(&out.trace, &image_pos), "seed {seed}: joint decoding changed a frozen image token");
        ensure!(!out.seq.ids.contains(&MASK), "seed {seed}: MASK left after joint decoding");
        ensure!(out.seq.image_tokens().iter().all(|&t| is_image(t)), "seed {seed}: joint image unfinished");
    }
    Ok("gamma boundaries exact; 100 seeds x (image, text, joint) decodes with K in {1,3,10,20}".into())
}

// ---- 4: term composition -----------------------------------------------------

fn composition() -> Checked {
    let (_, data) = small_data(64, 131);
    let mut tc = small_train_config(Attention::Bidirectional, 4, 10_000);
    tc.model.layers = 1;
    tc.model.dim = 8;
    let mut tr = ok(Trainer::new(tc.clone(), ok(ModelParams::init(tc.model, 1))?))?;
    let mut counts = [0usize; 3];
    let n = 10_000;
    for _ in 0..n {
        let r = ok(tr.train_step(&data))?;
        let t = active_terms(r.task, &tc.lambdas);
        ensure!(
            r.length.is_some() == t.length && r.unroll.is_some() == t.unroll && r.mixsel.is_some() == t.mixsel,
            "step {}: {} reported terms differ from the indicators",
            r.step,
            r.task.name()
        );
        ensure!(r.total == r.composed(&tc.lambdas), "step {}: total {} is not the weighted sum", r.step, r.total);
        counts[Task::ALL.iter().position(|&x| x == r.task).unwrap()] += 1;
    }
    let mut z = Vec::new();
    for (task, &c) in Task::ALL.iter().zip(&counts) {
        let p = tc.tasks.probability(*task);
        let sigma = (n as f64 * p * (1.0 - p)).sqrt();
        let dev = (c as f64 - n as f64 * p) / sigma;
        ensure!(dev.abs() <= 3.0, "{}: {c} of {n} is {dev:.2} sigma off", task.name());
        z.push(format!("{}={c} ({dev:+.2}σ)", task.name()));
    }
    Ok(format!("{n} batches; indicators and totals exact; {}", z.join(" ")))
}

// ---- 5: learning -------------------------------------------------------------

struct Learning {
    start: f64,
    end: f64,
    i2t: f64,
    t2i: f64,
    length: f64,
    secs: f64,
}

/// Trains `rc` from scratch and scores it on held-out samples. The start is
/// the mean T2I mask loss over the first 1% of steps, the end over the last 10%.
fn learn(rc: &RunConfig, eval_samples: usize) -> Result<Learning, String> {
    let t0 = Instant::now();
    let tc = ok(rc.train())?;
    let layout = rc.layout();
    let split = ok(make_split(rc.n_train, rc.n_val, rc.seed, rc.grid))?;
    let data = ok(encode_samples(&split.train, &layout))?;
    let mut tr = ok(Trainer::new(tc.clone(), ok(init_params(&tc))?))?;
    let head = (tc.steps / 100).max(20);
    let tail_from = tc.steps - tc.steps.div_ceil(10);
    let (mut first, mut last) = (Vec::new(), Vec::new());
    while tr.step < tc.steps {
        let r = ok(tr.train_step(&data))?;
        if r.task == Task::T2I && !r.skipped {
            if r.step <= head {
                first.push(r.mask);
            }
            if r.step > tail_from {
                last.push(r.mask);
            }
        }
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len().max(1) as f64;
    let opts = EvalOptions {
        samples: eval_samples,
        joint: 0,
        seed: rc.seed,
        config_hash: rc.hash(),
    };
    let ev = ok(eval_model(&tr.params, &layout, &split.val, &ok(rc.request())?, &opts))?;
    Ok(Learning {
        start: mean(&first),
        end: mean(&last),
        i2t: ev.report.i2t_oracle,
        t2i: ev.report.t2i_oracle,
        length: ev.report.length_accuracy,
        secs: t0.elapsed().as_secs_f64(),
    })
}

fn describe(l: &Learning) -> String {
    format!(
        "T2I mask loss per sample {:.3} -> {:.3} ({:.0}% drop); i2t {:.2}, t2i {:.2}, length {:.2}; {:.0}s",
        l.start,
        l.end,
        100.0 * (1.0 - l.end / l.start),
        l.i2t,
        l.t2i,
        l.length,
        l.secs
    )
}

fn toy_learning() -> Outcome {
    if !full_scale() {
        return Outcome::Skipped(
            "20k steps at L4 D128 batch 64 is far beyond a test run on this CPU; set MAGVLT_ACCEPT_FULL=1".into(),
        );
    }
    let rc = RunConfig::reference();
    match learn(&rc, rc.eval_samples) {
        Err(e) => Outcome::Fail(e),
        Ok(l) => {
            let d = describe(&l);
            if l.end <= 0.5 * l.start && l.i2t >= 0.80 && l.t2i >= 0.70 && l.length >= 0.90 {
                Outcome::Pass(d)
            } else {
                Outcome::Fail(d)
            }
        }
    }
}

/// The reference recipe shrunk to fit a test run. Only the loss drop is
/// asserted; the held-out rates are printed against their full-scale targets.
fn reduced_learning() -> Outcome {
    let mut rc = RunConfig::reference();
    for (k, v) in [("layers", "2"), ("dim", "32"), ("batch", "16"), ("steps", "400"), ("n_train", "4000"), ("n_val", "100"), ("lr", "1e-3")] {
        rc.set(k, v).unwrap();
    }
    match learn(&rc, 50) {
        Err(e) => Outcome::Fail(e),
        Ok(l) => {
            let d = format!(
                "L2 D32 batch 16, 400 steps: {} (held-out targets 0.80/0.70/0.90 apply to the full run only)",
                describe(&l)
            );
            if l.end <= 0.5 * l.start {
                Outcome::Pass(d)
            } else {
                Outcome::Fail(d)
            }
        }
    }
}

// ---- 6: speedup --------------------------------------------------------------

fn speedup() -> Checked {
    let rc = RunConfig::reference();
    let layout = rc.layout();
    let masked: ModelParams<f32> = ok(ModelParams::init(rc.model(), 1))?;
    let mut ar_rc = rc.clone();
    ok(ar_rc.set("objective", "ar"))?;
    let ar: ModelParams<f32> = ok(ModelParams::init(ar_rc.model(), 2))?;
    let prompts = ok(make_split(1, 4, 0, rc.grid))?.val;
    let cells = [
        BenchCell { modality: Task::T2I, k: rc.k_image },
        BenchCell { modality: Task::I2T, k: rc.k_text },
    ];
    let rep = ok(bench_decode(&masked, &ar, &layout, &prompts, &cells, 5, 1, &ok(rc.request())?, &rc.hash()))?;
    let t2i = &rep.cells[0];
    let i2t = &rep.cells[1];
    ensure!(t2i.ar_forwards == layout.n_image() * prompts.len(), "ar forwards {}", t2i.ar_forwards);
    ensure!(t2i.masked_forwards == rc.k_image * prompts.len(), "masked forwards {}", t2i.masked_forwards);
    ensure!(t2i.invocation_ratio == 6.4, "invocation ratio {}", t2i.invocation_ratio);
    let d = format!(
        "image: {} vs {} calls (ratio {}), wall-clock {:.2}x over 5 repeats; text {:.2}x (reported only)",
        t2i.ar_forwards, t2i.masked_forwards, t2i.invocation_ratio, t2i.speedup, i2t.speedup
    );
    ensure!(t2i.speedup >= 2.0, "{d}");
    Ok(d)
}

// ---- 7: ablations ------------------------------------------------------------

fn ablations() -> Outcome {
    if !full_scale() {
        return Outcome::Skipped(
            "three variants x 3 seeds x 20k steps at L4 D128 cannot run here; set MAGVLT_ACCEPT_FULL=1".into(),
        );
    }
    let base = RunConfig::reference();
    let split = match make_split(base.n_train, base.n_val, base.seed, base.grid) {
        Ok(s) => s,
        Err(e) => return Outcome::Fail(e.to_string()),
    };
    let cells: Vec<AblationCell> = Variant::ALL
        .into_iter()
        .map(|variant| AblationCell { weights: "8:1:1".into(), variant })
        .collect();
    match run_ablation(&base, &cells, &[0, 1, 2], &split, |_| {}) {
        Err(e) => Outcome::Fail(e.to_string()),
        Ok(rows) => {
            let d = Directional::from_rows(&rows, "8:1:1");
            if d.i2t_holds() && d.fidelity_holds() {
                Outcome::Pass(d.summary())
            } else {
                Outcome::Fail(d.summary())
            }
        }
    }
}

// ---- 8: round trips ----------------------------------------------------------

fn round_trips() -> Checked {
    let dir = ok(tempfile::tempdir())?;
    let params: ModelParams<f32> = small_model(Attention::Bidirectional, 141).cast();
    let bytes = encode_checkpoint(&params, "grid = 4\n", "abc", 3);
    let (back, header) = ok(decode_checkpoint(&bytes))?;
    let bits = |p: &ModelParams<f32>| -> Vec<u32> { p.tensors.iter().flat_map(|t| t.data().iter().map(|v| v.to_bits())).collect() };
    ensure!(bits(&back) == bits(&params) && header.model == params.config, "checkpoint tensors differ after reload");
    ensure!(encode_checkpoint(&back, "grid = 4\n", "abc", 3) == bytes, "checkpoint re-encodes differently");

    let split = ok(make_split(200, 50, 142, 8))?;
    let path = dir.path().join("train.tsv");
    ok(write_shard(&path, &split.train))?;
    ensure!(ok(read_shard(&path, 8))? == split.train, "shard reload differs");

    let vocab = VocabFile::current();
    let text = vocab.to_json();
    let again = ok(VocabFile::from_json(&text))?;
    ensure!(again == vocab && again.to_json() == text, "vocabulary reload differs");
    Ok(format!("checkpoint {} bytes, shard of {} samples, vocabulary of {VOCAB_SIZE} ids", bytes.len(), split.train.len()))
}

// ---- 9: determinism ----------------------------------------------------------

/// Dataset, training, evaluation and a decode trace into `dir`.
fn pipeline(dir: &Path) -> Result<(), String> {
    let mut rc = RunConfig::toy();
    for (k, v) in [
        ("grid", "4"), ("max_text", "8"), ("n_train", "200"), ("n_val", "20"), ("layers", "1"), ("dim", "16"),
        ("heads", "2"), ("batch", "8"), ("steps", "12"), ("eval_samples", "10"), ("eval_joint", "4"),
        ("joint_len_max", "8"), ("seed", "5"),
    ] {
        ok(rc.set(k, v))?;
    }
    let split = ok(make_split(rc.n_train, rc.n_val, rc.seed, rc.grid))?;
    let manifest = Manifest {
        grid: rc.grid,
        max_text: rc.max_text,
        n_train: rc.n_train,
        n_val: rc.n_val,
        seed: rc.seed,
        grammar_version: 1,
        config_hash: rc.hash(),
    };
    ok(write_dataset(&dir.join("data"), &split, &manifest))?;
    let layout = rc.layout();
    let data = ok(encode_samples(&split.train, &layout))?;
    let prov = Provenance {
        run_config: rc.to_text(),
        config_hash: rc.hash(),
    };
    let tr = ok(run_training(ok(rc.train())?, &data, &RunPaths::new(dir.join("run")), 5, &prov, false, |_| {}))?;
    let req = ok(rc.request())?;
    let opts = EvalOptions {
        samples: rc.eval_samples,
        joint: rc.eval_joint,
        seed: rc.seed,
        config_hash: rc.hash(),
    };
    let ev = ok(eval_model(&tr.params, &layout, &split.val, &req, &opts))?;
    ok(std::fs::write(dir.join("eval.csv"), ev.report.to_csv()))?;
    ok(write_audit(&dir.join("audit.jsonl"), &ev.audit))?;
    let out = ok(decode_image(&tr.params, &layout, &data[0].y, &req))?;
    ok(std::fs::write(dir.join("trace.json"), ok(serde_json::to_string(&out.trace))?))?;
    Ok(())
}

fn files_under(dir: &Path) -> Vec<std::path::PathBuf> {
    let mut out = Vec::new();
    for entry in std::fs::read_dir(dir).unwrap() {
        let p = entry.unwrap().path();
        if p.is_dir() { out.extend(files_under(&p)) } else { out.push(p) }
    }
    out.sort();
    out
}

fn determinism() -> Checked {
    let a = ok(tempfile::tempdir())?;
    let b = ok(tempfile::tempdir())?;
    pipeline(a.path())?;
    pipeline(b.path())?;
    let fa = files_under(a.path());
    let fb = files_under(b.path());
    let rel = |root: &Path, v: &[std::path::PathBuf]| -> Vec<std::path::PathBuf> {
        v.iter().map(|p| p.strip_prefix(root).unwrap().to_path_buf()).collect()
    };
    ensure!(rel(a.path(), &fa) == rel(b.path(), &fb), "the two runs wrote different file sets");
    let mut compared = 0;
    for (pa, pb) in fa.iter().zip(&fb) {
        // per-step wall-clock is the one artifact that is timing by design
        if pa.file_name().is_some_and(|n| n == "timing.csv") {
            continue;
        }
        ensure!(ok(std::fs::read(pa))? == ok(std::fs::read(pb))?, "{} differs", pa.strip_prefix(a.path()).unwrap().display());
        compared += 1;
    }
    Ok(format!("{compared} artifacts identical across two runs (timing.csv excluded)"))
}

// ------------------------------------------------------------------------------

fn checked(f: fn() -> Checked) -> impl Fn() -> Outcome {
    move || match f() {
        Ok(d) => Outcome::Pass(d),
        Err(d) => Outcome::Fail(d),
    }
}

fn main() {
    let criteria: Vec<(&str, &str, Box<dyn Fn() -> Outcome>)> = vec![
        ("1", "gradient correctness", Box::new(checked(gradient_correctness))),
        ("2", "loss locality", Box::new(checked(loss_locality))),
        ("3", "schedule and decode invariants", Box::new(checked(decode_invariants))),
        ("4", "term composition", Box::new(checked(composition))),
        ("5", "toy learning", Box::new(toy_learning)),
        ("5r", "learning at reduced scale (loss drop only)", Box::new(reduced_learning)),
        ("6", "decoding speedup", Box::new(checked(speedup))),
        ("7", "directional ablations", Box::new(ablations)),
        ("8", "round trips", Box::new(checked(round_trips))),
        ("9", "determinism", Box::new(checked(determinism))),
    ];
    let only: Option<Vec<String>> = std::env::var("MAGVLT_ACCEPT_ONLY")
        .ok()
        .map(|s| s.split(',').map(|x| x.trim().to_string()).collect());
    let mut failed = 0;
    for (id, name, run) in &criteria {
        if only.as_ref().is_some_and(|o| !o.iter().any(|x| x == id)) {
            continue;
        }
        let t0 = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Outcome::Fail(format!("panicked: {msg}"))
        });
        let secs = t0.elapsed().as_secs_f64();
        let (tag, detail) = match outcome {
            Outcome::Pass(d) => ("PASS", d),
            Outcome::Fail(d) => {
                failed += 1;
                ("FAIL", d)
            }
            Outcome::Skipped(d) => ("SKIPPED", d),
        };
        println!("{tag:<7} [{id:>2}] {name} ({secs:.1}s): {detail}");
    }
    if failed > 0 {
        std::process::exit(1);
    }
}

