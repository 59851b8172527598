//! Oracle-based evaluation, the MixSel selection probe, the ablation
//! driver, and the masked-vs-causal decoding benchmark.
//!
//! Every rate in an [`EvalReport`] is a pure function of the per-sample
//! audit records, so the log alone is enough to recompute it.

use std::collections::HashSet;
use std::fs;
use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::decode::{
    decode_ar, decode_image, decode_joint, decode_text, decode_text_selected, generate_image, generate_text, SampleRequest,
};
use crate::error::{Error, Result};
use crate::mask::{sample_training_mask, Task};
use crate::model::{Attention, ModelParams};
use crate::synth::{derive_seed, mix_images, oracle_check, MixAxis, Sample, Split};
use crate::train::{
    ar_term, encode_samples, init_params, mask_term, term_value, Encoded, Lambdas, MixChoice, Trainer,
};
use crate::vocab::{GridImage, Layout, TextCodec, TokenId, PAD};

const EVAL_STREAM: u64 = 0x4556_414c;
const LOSS_STREAM: u64 = 0x4c4f_5353;
const PROBE_STREAM: u64 = 0x5052_4f42;
const BENCH_STREAM: u64 = 0x4245_4e43;

/// One line of the evaluation audit log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AuditRecord {
    /// `i2t`, `t2i`, `joint` or `loss`.
    pub task: String,
    pub index: usize,
    /// Conditioning or reference caption; empty for joint samples.
    pub reference: String,
    /// Generated caption, or the generated image as space-separated cell codes.
    pub output: String,
    pub exact: Option<bool>,
    pub oracle: Option<bool>,
    /// Oracle verdict with the output paired to another sample's condition.
    pub shuffled_oracle: Option<bool>,
    pub len_true: Option<usize>,
    pub len_pred: Option<usize>,
    pub loss: Option<f64>,
}

impl AuditRecord {
    fn new(task: &str, index: usize) -> Self {
        Self {
            task: task.into(),
            index,
            reference: String::new(),
            output: String::new(),
            exact: None,
            oracle: None,
            shuffled_oracle: None,
            len_true: None,
            len_pred: None,
            loss: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub config_hash: String,
    pub seed: u64,
    pub i2t_samples: usize,
    pub i2t_exact: f64,
    pub i2t_oracle: f64,
    pub i2t_shuffled: f64,
    pub length_accuracy: f64,
    pub t2i_samples: usize,
    pub t2i_oracle: f64,
    pub t2i_shuffled: f64,
    pub joint_samples: usize,
    pub joint_oracle: f64,
    pub loss_samples: usize,
    pub heldout_mask_loss: f64,
}

fn rate<'a>(it: impl Iterator<Item = &'a AuditRecord>, f: impl Fn(&AuditRecord) -> Option<bool>) -> (usize, f64) {
    let (mut n, mut hits) = (0usize, 0usize);
    for r in it {
        if let Some(v) = f(r) {
            n += 1;
            hits += v as usize;
        }
    }
    (n, if n == 0 { 0.0 } else { hits as f64 / n as f64 })
}

impl EvalReport {
    /// Aggregates audit records into the report.
    pub fn from_audit(config_hash: &str, seed: u64, audit: &[AuditRecord]) -> Self {
        let of = |t: &'static str| audit.iter().filter(move |r| r.task == t);
        let (i2t_samples, i2t_oracle) = rate(of("i2t"), |r| r.oracle);
        let (_, i2t_exact) = rate(of("i2t"), |r| r.exact);
        let (_, i2t_shuffled) = rate(of("i2t"), |r| r.shuffled_oracle);
        let (_, length_accuracy) = rate(of("i2t"), |r| match (r.len_true, r.len_pred) {
            (Some(t), Some(p)) => Some(t.abs_diff(p) <= 1),
            _ => None,
        });
        let (t2i_samples, t2i_oracle) = rate(of("t2i"), |r| r.oracle);
        let (_, t2i_shuffled) = rate(of("t2i"), |r| r.shuffled_oracle);
        let (joint_samples, joint_oracle) = rate(of("joint"), |r| r.oracle);
        let losses: Vec<f64> = of("loss").filter_map(|r| r.loss).collect();
        Self {
            config_hash: config_hash.into(),
            seed,
            i2t_samples,
            i2t_exact,
            i2t_oracle,
            i2t_shuffled,
            length_accuracy,
            t2i_samples,
            t2i_oracle,
            t2i_shuffled,
            joint_samples,
            joint_oracle,
            loss_samples: losses.len(),
            heldout_mask_loss: if losses.is_empty() {
                0.0
            } else {
                losses.iter().sum::<f64>() / losses.len() as f64
            },
        }
    }

    pub const CSV_HEADER: &'static str = "config_hash,seed,i2t_samples,i2t_exact,i2t_oracle,i2t_shuffled,length_accuracy,\
t2i_samples,t2i_oracle,t2i_shuffled,joint_samples,joint_oracle,loss_samples,heldout_mask_loss";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            self.config_hash,
            self.seed,
            self.i2t_samples,
            self.i2t_exact,
            self.i2t_oracle,
            self.i2t_shuffled,
            self.length_accuracy,
            self.t2i_samples,
            self.t2i_oracle,
            self.t2i_shuffled,
            self.joint_samples,
            self.joint_oracle,
            self.loss_samples,
            self.heldout_mask_loss
        )
    }

    pub fn to_csv(&self) -> String {
        format!("{}\n{}\n", Self::CSV_HEADER, self.csv_row())
    }
}

/// Binomial standard error of a rate.
pub fn rate_sigma(p: f64, n: usize) -> f64 {
    if n == 0 {
        0.0
    } else {
        (p * (1.0 - p) / n as f64).sqrt()
    }
}

pub fn write_audit(path: &Path, audit: &[AuditRecord]) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    for r in audit {
        let line = serde_json::to_string(r).map_err(|e| Error::Parse(e.to_string()))?;
        writeln!(f, "{line}").map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

pub fn parse_audit(text: &str) -> Result<Vec<AuditRecord>> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| Error::Parse(format!("audit line {}: {e}", i + 1))))
        .collect()
}

pub fn read_audit(path: &Path) -> Result<Vec<AuditRecord>> {
    parse_audit(&fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
}

/// True when no scene of `val` also appears in `train`.
pub fn disjoint(train: &[Sample], val: &[Sample]) -> bool {
    let seen: HashSet<String> = train.iter().map(|s| s.scene_hash()).collect();
    val.iter().all(|s| !seen.contains(&s.scene_hash()))
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalOptions {
    /// Held-out samples used (at most the shard size).
    pub samples: usize,
    /// Unconditional joint samples.
    pub joint: usize,
    pub seed: u64,
    pub config_hash: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub report: EvalReport,
    pub audit: Vec<AuditRecord>,
}

fn cells_line(img: &GridImage) -> String {
    img.cells().iter().map(|c| c.code().to_string()).collect::<Vec<_>>().join(" ")
}

fn caption_of(layout: &Layout, words: &[TokenId]) -> Result<String> {
    let mut y = words.to_vec();
    y.resize(layout.n_text, PAD);
    TextCodec::new(layout.n_text).decode(&y)
}

/// Oracle verdict that treats unparseable captions as false.
fn verdict(img: &GridImage, caption: &str) -> bool {
    oracle_check(img, caption).unwrap_or(false)
}

/// Evaluates a model on held-out samples: conditional generation in both
/// directions, joint samples, and the held-out loss. Works for both the
/// masked model and the causal baseline (which has no joint mode).
pub fn eval_model(
    params: &ModelParams<f32>,
    layout: &Layout,
    val: &[Sample],
    req: &SampleRequest,
    opts: &EvalOptions,
) -> Result<Evaluation> {
    if val.is_empty() || opts.samples == 0 {
        return Err(Error::Contract("evaluation shard is empty".into()));
    }
    let val = &val[..opts.samples.min(val.len())];
    let enc = encode_samples(val, layout)?;
    let causal = params.config.attention == Attention::Causal;
    let n = val.len();
    let mut i2t = Vec::with_capacity(n);
    let mut t2i = Vec::with_capacity(n);
    let mut captions = Vec::with_capacity(n);
    let mut images = Vec::with_capacity(n);
    for (i, (s, e)) in val.iter().zip(&enc).enumerate() {
        let r = SampleRequest {
            seed: derive_seed(opts.seed, EVAL_STREAM, i as u64),
            ..req.clone()
        };
        let (cap, len_pred) = if causal {
            let o = decode_ar(params, layout, &e.x, Task::I2T, &r)?;
            (caption_of(layout, &o.tokens)?, o.tokens.len())
        } else {
            let o = generate_text(params, layout, &e.x, &r)?;
            (o.caption()?, o.trace.predicted_len.unwrap_or(0))
        };
        let img = if causal {
            GridImage::decode(layout.grid, &decode_ar(params, layout, &e.y, Task::T2I, &r)?.tokens)?
        } else {
            generate_image(params, layout, &e.y, &r)?.image()?
        };
        let mut a = AuditRecord::new("i2t", i);
        a.reference = s.caption.clone();
        a.output = cap.clone();
        a.exact = Some(cap == s.caption);
        a.oracle = Some(verdict(&s.image, &cap));
        a.len_true = Some(e.len);
        a.len_pred = Some(len_pred);
        i2t.push(a);
        let mut b = AuditRecord::new("t2i", i);
        b.reference = s.caption.clone();
        b.output = cells_line(&img);
        b.oracle = Some(verdict(&img, &s.caption));
        t2i.push(b);
        captions.push(cap);
        images.push(img);
    }
    // shuffled pairing: output i against the condition of sample i+1
    if n > 1 {
        for i in 0..n {
            let j = (i + 1) % n;
            i2t[i].shuffled_oracle = Some(verdict(&val[j].image, &captions[i]));
            t2i[i].shuffled_oracle = Some(verdict(&images[i], &val[j].caption));
        }
    }
    let mut audit = i2t;
    audit.extend(t2i);
    if !causal {
        for j in 0..opts.joint {
            let r = SampleRequest {
                seed: derive_seed(opts.seed, EVAL_STREAM + 1, j as u64),
                ..req.clone()
            };
            let o = decode_joint(params, layout, &r)?;
            let img = o.image()?;
            let cap = o.caption().unwrap_or_default();
            let mut a = AuditRecord::new("joint", j);
            a.oracle = Some(verdict(&img, &cap));
            a.output = format!("{}\t{}", cells_line(&img), cap);
            a.len_pred = o.trace.predicted_len;
            audit.push(a);
        }
    }
    for (i, e) in enc.iter().enumerate() {
        let mut a = AuditRecord::new("loss", i);
        a.loss = Some(heldout_loss(params, layout, e, req, derive_seed(opts.seed, LOSS_STREAM, i as u64))?);
        audit.push(a);
    }
    Ok(Evaluation {
        report: EvalReport::from_audit(&opts.config_hash, opts.seed, &audit),
        audit,
    })
}

/// Unsmoothed loss of one sample: the masked NLL averaged over the three
/// tasks, or the next-token NLL averaged over both directions.
pub fn heldout_loss(params: &ModelParams<f32>, layout: &Layout, e: &Encoded, req: &SampleRequest, seed: u64) -> Result<f64> {
    if params.config.attention == Attention::Causal {
        let mut total = 0.0;
        for dir in [Task::T2I, Task::I2T] {
            let tb = ar_term(layout, &[e], dir, 1.0, 0.0)?;
            total += term_value(params, layout, &tb, 0.0)?;
        }
        return Ok(total / 2.0);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut total = 0.0;
    for task in Task::ALL {
        let plan = sample_training_mask(&mut rng, layout.n_image(), e.len, task, req.schedules);
        let tb = mask_term(layout, &[e], task, &[plan])?;
        total += term_value(params, layout, &tb, 0.0)?;
    }
    Ok(total / Task::ALL.len() as f64)
}

// ---- MixSel probe ------------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeRecord {
    pub first: usize,
    pub second: usize,
    pub select: usize,
    pub vertical: bool,
    pub caption: String,
    pub selected_ok: bool,
    pub other_ok: bool,
    /// The same verdicts for the caption generated for the next pair.
    pub shuffled_selected_ok: bool,
    pub shuffled_other_ok: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub pairs: usize,
    /// Pairs dropped because both halves come from the same image.
    pub skipped: usize,
    pub fidelity: f64,
    pub shuffled_fidelity: f64,
    pub records: Vec<ProbeRecord>,
}

/// Captions mixed images with a selector naming one source; a pair counts
/// when the caption fits the selected source and not the other.
pub fn mixsel_probe(
    params: &ModelParams<f32>,
    layout: &Layout,
    probe: &[Sample],
    req: &SampleRequest,
    seed: u64,
) -> Result<ProbeReport> {
    let mut records = Vec::new();
    let mut skipped = 0;
    for p in 0..probe.len() / 2 {
        let (a, b) = (&probe[2 * p], &probe[2 * p + 1]);
        if a.image == b.image {
            skipped += 1;
            continue;
        }
        let choice = MixChoice {
            select: p % 2,
            axis: if (p / 2) % 2 == 0 {
                MixAxis::Horizontal
            } else {
                MixAxis::Vertical
            },
        };
        let mixed = mix_images(&a.image, &b.image, choice.axis)?;
        let r = SampleRequest {
            seed: derive_seed(seed, PROBE_STREAM, p as u64),
            ..req.clone()
        };
        let o = decode_text_selected(params, layout, &mixed.encode(), choice.image_selector(), &r)?;
        let caption = o.caption().unwrap_or_default();
        let (sel, other) = if choice.select == 0 { (a, b) } else { (b, a) };
        records.push(ProbeRecord {
            first: 2 * p,
            second: 2 * p + 1,
            select: choice.select,
            vertical: choice.axis == MixAxis::Vertical,
            selected_ok: verdict(&sel.image, &caption),
            other_ok: verdict(&other.image, &caption),
            caption,
            shuffled_selected_ok: false,
            shuffled_other_ok: false,
        });
    }
    let n = records.len();
    if n > 1 {
        for i in 0..n {
            let cap = records[(i + 1) % n].caption.clone();
            let r = &records[i];
            let (sel, other) = if r.select == 0 { (r.first, r.second) } else { (r.second, r.first) };
            let (s_ok, o_ok) = (verdict(&probe[sel].image, &cap), verdict(&probe[other].image, &cap));
            records[i].shuffled_selected_ok = s_ok;
            records[i].shuffled_other_ok = o_ok;
        }
    }
    let frac = |f: &dyn Fn(&ProbeRecord) -> bool| {
        if n == 0 {
            0.0
        } else {
            records.iter().filter(|r| f(r)).count() as f64 / n as f64
        }
    };
    Ok(ProbeReport {
        pairs: probe.len() / 2,
        skipped,
        fidelity: frac(&|r| r.selected_ok && !r.other_ok),
        shuffled_fidelity: if n > 1 {
            frac(&|r| r.shuffled_selected_ok && !r.shuffled_other_ok)
        } else {
            0.0
        },
        records,
    })
}

// ---- ablations -----------------------------------------------------------------

pub const ABLATION_WEIGHTS: [&str; 6] = ["1:0:0", "0:1:0", "8:1:1", "2:1:1", "8:2:0", "0:0:1"];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Variant {
    Base,
    Unroll,
    UnrollMixSel,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::Base, Variant::Unroll, Variant::UnrollMixSel];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Base => "base",
            Variant::Unroll => "+um",
            Variant::UnrollMixSel => "+um+ms",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|v| v.name() == s)
    }

    /// The auxiliary weights of the variant; the configured values are
    /// kept for the terms it switches on.
    pub fn lambdas(self, configured: Lambdas) -> Lambdas {
        match self {
            Variant::Base => Lambdas { um: 0.0, ms: 0.0, ..configured },
            Variant::Unroll => Lambdas { ms: 0.0, ..configured },
            Variant::UnrollMixSel => configured,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AblationCell {
    pub weights: String,
    pub variant: Variant,
}

/// Every task-weight setting crossed with every variant.
pub fn ablation_matrix() -> Vec<AblationCell> {
    ABLATION_WEIGHTS
        .iter()
        .flat_map(|w| {
            Variant::ALL.into_iter().map(move |variant| AblationCell {
                weights: w.to_string(),
                variant,
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub weights: String,
    pub variant: String,
    pub seed: u64,
    pub config_hash: String,
    pub steps: u64,
    /// Mean training mask loss over the last tenth of the run.
    pub final_mask_loss: f64,
    pub i2t_exact: f64,
    pub i2t_oracle: f64,
    pub t2i_oracle: f64,
    pub length_accuracy: f64,
    pub joint_oracle: f64,
    pub heldout_mask_loss: f64,
    pub mixsel_fidelity: f64,
}

impl AblationRow {
    pub const CSV_HEADER: &'static str = "weights,variant,seed,config_hash,steps,final_mask_loss,i2t_exact,i2t_oracle,\
t2i_oracle,length_accuracy,joint_oracle,heldout_mask_loss,mixsel_fidelity";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{}",
            self.weights,
            self.variant,
            self.seed,
            self.config_hash,
            self.steps,
            self.final_mask_loss,
            self.i2t_exact,
            self.i2t_oracle,
            self.t2i_oracle,
            self.length_accuracy,
            self.joint_oracle,
            self.heldout_mask_loss,
            self.mixsel_fidelity
        )
    }
}

/// The run config of one cell.
pub fn cell_config(base: &RunConfig, cell: &AblationCell, seed: u64) -> Result<RunConfig> {
    let mut rc = base.clone();
    rc.set("task_weights", &cell.weights)?;
    let l = cell.variant.lambdas(Lambdas {
        tl: base.lambda_tl,
        um: base.lambda_um,
        ms: base.lambda_ms,
    });
    rc.lambda_um = l.um;
    rc.lambda_ms = l.ms;
    rc.seed = seed;
    rc.validate()?;
    Ok(rc)
}

/// Trains a cell from scratch on `split.train` and evaluates it on `split.val`.
pub fn run_cell(base: &RunConfig, cell: &AblationCell, seed: u64, split: &Split) -> Result<(AblationRow, ModelParams<f32>)> {
    let rc = cell_config(base, cell, seed)?;
    let tc = rc.train()?;
    let layout = rc.layout();
    let data = encode_samples(&split.train, &layout)?;
    let mut trainer = Trainer::new(tc.clone(), init_params(&tc)?)?;
    let tail_from = tc.steps - tc.steps.div_ceil(10);
    let mut tail = Vec::new();
    while trainer.step < tc.steps {
        let r = trainer.train_step(&data)?;
        if r.step >= tail_from && !r.skipped {
            tail.push(r.mask);
        }
    }
    let req = rc.request()?;
    let opts = EvalOptions {
        samples: rc.eval_samples,
        joint: rc.eval_joint,
        seed,
        config_hash: rc.hash(),
    };
    let ev = eval_model(&trainer.params, &layout, &split.val, &req, &opts)?;
    let probe = mixsel_probe(&trainer.params, &layout, &split.val[..rc.eval_samples.min(split.val.len())], &req, seed)?;
    let row = AblationRow {
        weights: cell.weights.clone(),
        variant: cell.variant.name().into(),
        seed,
        config_hash: opts.config_hash,
        steps: tc.steps,
        final_mask_loss: if tail.is_empty() {
            f64::NAN
        } else {
            tail.iter().sum::<f64>() / tail.len() as f64
        },
        i2t_exact: ev.report.i2t_exact,
        i2t_oracle: ev.report.i2t_oracle,
        t2i_oracle: ev.report.t2i_oracle,
        length_accuracy: ev.report.length_accuracy,
        joint_oracle: ev.report.joint_oracle,
        heldout_mask_loss: ev.report.heldout_mask_loss,
        mixsel_fidelity: probe.fidelity,
    };
    Ok((row, trainer.params))
}

/// One row per (cell, seed), cells in the given order with seeds innermost.
pub fn run_ablation(
    base: &RunConfig,
    cells: &[AblationCell],
    seeds: &[u64],
    split: &Split,
    mut on_row: impl FnMut(&AblationRow),
) -> Result<Vec<AblationRow>> {
    let mut rows = Vec::with_capacity(cells.len() * seeds.len());
    for cell in cells {
        for &seed in seeds {
            let (row, _) = run_cell(base, cell, seed, split)?;
            on_row(&row);
            rows.push(row);
        }
    }
    Ok(rows)
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut s = format!("{}\n", AblationRow::CSV_HEADER);
    for r in rows {
        s.push_str(&r.csv_row());
        s.push('\n');
    }
    s
}

/// Seed means behind the two directional ablation checks.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Directional {
    pub weights: String,
    pub base_i2t: Vec<f64>,
    pub full_i2t: Vec<f64>,
    pub no_mixsel_fidelity: Vec<f64>,
    pub mixsel_fidelity: Vec<f64>,
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        f64::NAN
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

impl Directional {
    /// Base against +um+ms on I2T, and +um against +um+ms on fidelity,
    /// so the fidelity comparison differs only in the MixSel term.
    pub fn from_rows(rows: &[AblationRow], weights: &str) -> Self {
        let pick = |v: Variant, f: fn(&AblationRow) -> f64| -> Vec<f64> {
            rows.iter()
                .filter(|r| r.weights == weights && r.variant == v.name())
                .map(f)
                .collect()
        };
        Self {
            weights: weights.into(),
            base_i2t: pick(Variant::Base, |r| r.i2t_oracle),
            full_i2t: pick(Variant::UnrollMixSel, |r| r.i2t_oracle),
            no_mixsel_fidelity: pick(Variant::Unroll, |r| r.mixsel_fidelity),
            mixsel_fidelity: pick(Variant::UnrollMixSel, |r| r.mixsel_fidelity),
        }
    }

    pub fn i2t_holds(&self) -> bool {
        !self.base_i2t.is_empty() && mean(&self.full_i2t) >= mean(&self.base_i2t)
    }

    pub fn fidelity_holds(&self) -> bool {
        !self.mixsel_fidelity.is_empty() && mean(&self.mixsel_fidelity) > mean(&self.no_mixsel_fidelity)
    }

    pub fn summary(&self) -> String {
        let range = |v: &[f64]| {
            let lo = v.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            format!("{:.3} [{lo:.3}, {hi:.3}]", mean(v))
        };
        format!(
            "weights {}: i2t base {} vs +um+ms {}; fidelity +um {} vs +um+ms {}",
            self.weights,
            range(&self.base_i2t),
            range(&self.full_i2t),
            range(&self.no_mixsel_fidelity),
            range(&self.mixsel_fidelity)
        )
    }
}

// ---- decoding benchmark ----------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BenchCell {
    /// `T2I` benchmarks image generation, `I2T` caption generation.
    pub modality: Task,
    pub k: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchTiming {
    pub modality: Task,
    pub k: usize,
    pub repeat: usize,
    pub masked_secs: f64,
    pub ar_secs: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchSummary {
    pub modality: Task,
    pub k: usize,
    pub repeats: usize,
    pub prompts: usize,
    /// Model calls per repeat, summed over prompts.
    pub masked_forwards: usize,
    pub ar_forwards: usize,
    pub invocation_ratio: f64,
    pub masked_mean: f64,
    pub masked_std: f64,
    pub ar_mean: f64,
    pub ar_std: f64,
    pub masked_tokens_per_sec: f64,
    pub ar_tokens_per_sec: f64,
    /// AR wall-clock over masked wall-clock.
    pub speedup: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub config_hash: String,
    pub timings: Vec<BenchTiming>,
    pub cells: Vec<BenchSummary>,
}

impl BenchReport {
    pub const TIMING_HEADER: &'static str = "config_hash,modality,k,repeat,masked_secs,ar_secs";
    pub const SUMMARY_HEADER: &'static str = "config_hash,modality,k,repeats,prompts,masked_forwards,ar_forwards,\
invocation_ratio,masked_mean,masked_std,ar_mean,ar_std,masked_tokens_per_sec,ar_tokens_per_sec,speedup";

    pub fn timing_csv(&self) -> String {
        let mut s = format!("{}\n", Self::TIMING_HEADER);
        for t in &self.timings {
            s.push_str(&format!(
                "{},{},{},{},{},{}\n",
                self.config_hash,
                t.modality.name(),
                t.k,
                t.repeat,
                t.masked_secs,
                t.ar_secs
            ));
        }
        s
    }

    pub fn summary_csv(&self) -> String {
        let mut s = format!("{}\n", Self::SUMMARY_HEADER);
        for c in &self.cells {
            s.push_str(&format!(
                "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}\n",
                self.config_hash,
                c.modality.name(),
                c.k,
                c.repeats,
                c.prompts,
                c.masked_forwards,
                c.ar_forwards,
                c.invocation_ratio,
                c.masked_mean,
                c.masked_std,
                c.ar_mean,
                c.ar_std,
                c.masked_tokens_per_sec,
                c.ar_tokens_per_sec,
                c.speedup
            ));
        }
        s
    }
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let m = mean(v);
    if v.len() < 2 {
        return (m, 0.0);
    }
    let var = v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (v.len() - 1) as f64;
    (m, var.sqrt())
}

/// (forwards, generated tokens) of one decode.
fn run_masked(params: &ModelParams<f32>, layout: &Layout, e: &Encoded, cell: BenchCell, req: &SampleRequest) -> Result<(usize, usize)> {
    match cell.modality {
        Task::T2I => {
            let r = SampleRequest { k_image: cell.k, ..req.clone() };
            let o = decode_image(params, layout, &e.y, &r)?;
            Ok((o.trace.forwards, layout.n_image()))
        }
        _ => {
            let r = SampleRequest { k_text: cell.k, ..req.clone() };
            let o = decode_text(params, layout, &e.x, &r)?;
            Ok((o.trace.forwards, o.trace.predicted_len.unwrap_or(0)))
        }
    }
}

fn run_ar(params: &ModelParams<f32>, layout: &Layout, e: &Encoded, cell: BenchCell, req: &SampleRequest) -> Result<(usize, usize)> {
    let o = match cell.modality {
        Task::T2I => decode_ar(params, layout, &e.y, Task::T2I, req)?,
        _ => decode_ar(params, layout, &e.x, Task::I2T, req)?,
    };
    Ok((o.forwards, o.tokens.len()))
}

/// Times masked decoding against the causal baseline on the same prompts.
/// Each repeat decodes every prompt once with each model; `warmup` untimed
/// rounds come first.
#[allow(clippy::too_many_arguments)]
pub fn bench_decode(
    masked: &ModelParams<f32>,
    ar: &ModelParams<f32>,
    layout: &Layout,
    prompts: &[Sample],
    cells: &[BenchCell],
    repeats: usize,
    warmup: usize,
    req: &SampleRequest,
    config_hash: &str,
) -> Result<BenchReport> {
    if repeats < 5 {
        return Err(Error::config("repeats", "the benchmark needs at least 5 repeats"));
    }
    if prompts.is_empty() {
        return Err(Error::Contract("no benchmark prompts".into()));
    }
    if masked.config.seq_len != ar.config.seq_len
        || masked.config.dim != ar.config.dim
        || masked.config.layers != ar.config.layers
        || masked.config.heads != ar.config.heads
    {
        return Err(Error::Contract("benchmark models differ in architecture".into()));
    }
    if let Some(c) = cells.iter().find(|c| c.modality == Task::IT2IT || c.k == 0) {
        return Err(Error::Contract(format!("unsupported benchmark cell {} K={}", c.modality.name(), c.k)));
    }
    let enc = encode_samples(prompts, layout)?;
    let reqs: Vec<SampleRequest> = (0..enc.len())
        .map(|p| SampleRequest {
            seed: derive_seed(req.seed, BENCH_STREAM, p as u64),
            ..req.clone()
        })
        .collect();
    let mut report = BenchReport {
        config_hash: config_hash.into(),
        timings: Vec::new(),
        cells: Vec::new(),
    };
    for &cell in cells {
        for _ in 0..warmup {
            run_masked(masked, layout, &enc[0], cell, &reqs[0])?;
            run_ar(ar, layout, &enc[0], cell, &reqs[0])?;
        }
        let (mut mt, mut at) = (Vec::new(), Vec::new());
        let mut counts = None;
        for rep in 0..repeats {
            let (mut mf, mut mtok, mut af, mut atok) = (0, 0, 0, 0);
            let t0 = Instant::now();
            for (e, r) in enc.iter().zip(&reqs) {
                let (f, t) = run_masked(masked, layout, e, cell, r)?;
                mf += f;
                mtok += t;
            }
            let ms = t0.elapsed().as_secs_f64();
            let t1 = Instant::now();
            for (e, r) in enc.iter().zip(&reqs) {
                let (f, t) = run_ar(ar, layout, e, cell, r)?;
                af += f;
                atok += t;
            }
            let as_ = t1.elapsed().as_secs_f64();
            match counts {
                None => counts = Some((mf, mtok, af, atok)),
                Some(c) if c != (mf, mtok, af, atok) => {
                    return Err(Error::Generation("decoding is not repeatable across benchmark repeats".into()))
                }
                _ => {}
            }
            mt.push(ms);
            at.push(as_);
            report.timings.push(BenchTiming {
                modality: cell.modality,
                k: cell.k,
                repeat: rep,
                masked_secs: ms,
                ar_secs: as_,
            });
        }
        let (mf, mtok, af, atok) = counts.unwrap();
        let (m_mean, m_std) = mean_std(&mt);
        let (a_mean, a_std) = mean_std(&at);
        report.cells.push(BenchSummary {
            modality: cell.modality,
            k: cell.k,
            repeats,
            prompts: enc.len(),
            masked_forwards: mf,
            ar_forwards: af,
            invocation_ratio: af as f64 / mf as f64,
            masked_mean: m_mean,
            masked_std: m_std,
            ar_mean: a_mean,
            ar_std: a_std,
            masked_tokens_per_sec: mtok as f64 / m_mean,
            ar_tokens_per_sec: atok as f64 / a_mean,
            speedup: a_mean / m_mean,
        });
    }
    Ok(report)
}

