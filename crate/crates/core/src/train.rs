//! Multitask training: loss-term construction, per-batch task sampling,
//! gradient accumulation across terms, optimizer stepping, metrics and
//! checkpoint files.
//!
//! Every loss term is described by a [`TermBatch`] (input ids plus the rows
//! and targets that contribute) so the same builders serve training in f32
//! and gradient checks in f64.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use magvlt_ndnum::{clip_grad_norm, AdamW, AdamWConfig, CosineSchedule, Scalar, Tape, Tensor, Var};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mask::{sample_training_mask, unroll_remask, MaskPlan, Schedules, Task};
use crate::model::{
    decode_checkpoint, decode_optimizer, encode_checkpoint, encode_optimizer, forward, Attention, ForwardOut,
    Inference, ModelConfig, ModelParams,
};
use crate::sampling::{sample_range, IdRange};
use crate::synth::{derive_seed, mix_images, mix_texts, MixAxis, Sample};
use crate::vocab::{
    special, GridImage, Layout, Modality, Order, Special, TextCodec, TokenId, TokenSequence,
    IMAGE_BASE, MASK, NONE, N_CELL_CODES, SPECIAL_BASE, TEXT_BASE,
};

pub const IMAGE_RANGE: IdRange = IdRange {
    lo: IMAGE_BASE,
    hi: IMAGE_BASE + N_CELL_CODES,
    extra: None,
};

pub const WORD_RANGE: IdRange = IdRange {
    lo: TEXT_BASE,
    hi: SPECIAL_BASE,
    extra: None,
};

/// Categorical distribution over the three masked tasks.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskWeights {
    pub t2i: f64,
    pub i2t: f64,
    pub it2it: f64,
}

impl Default for TaskWeights {
    fn default() -> Self {
        Self::new(8.0, 1.0, 1.0).unwrap()
    }
}

impl TaskWeights {
    /// Normalizes non-negative weights.
    pub fn new(t2i: f64, i2t: f64, it2it: f64) -> Result<Self> {
        let all = [t2i, i2t, it2it];
        if all.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::config("task_weights", "weights must be finite and non-negative"));
        }
        let s: f64 = all.iter().sum();
        if s <= 0.0 {
            return Err(Error::config("task_weights", "weights sum to zero"));
        }
        Ok(Self {
            t2i: t2i / s,
            i2t: i2t / s,
            it2it: it2it / s,
        })
    }

    /// Parses `a:b:c` in T2I:I2T:IT2IT order.
    pub fn parse(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.split(':').collect();
        if parts.len() != 3 {
            return Err(Error::config("task_weights", format!("`{s}` is not a:b:c")));
        }
        let mut v = [0.0; 3];
        for (slot, p) in v.iter_mut().zip(&parts) {
            *slot = p
                .trim()
                .parse()
                .map_err(|_| Error::config("task_weights", format!("`{p}` is not a number")))?;
        }
        Self::new(v[0], v[1], v[2])
    }

    pub fn probability(&self, task: Task) -> f64 {
        match task {
            Task::T2I => self.t2i,
            Task::I2T => self.i2t,
            Task::IT2IT => self.it2it,
        }
    }

    pub fn sample<R: Rng>(&self, rng: &mut R) -> Task {
        let u: f64 = rng.gen();
        if u < self.t2i {
            Task::T2I
        } else if u < self.t2i + self.i2t || self.it2it == 0.0 {
            if self.i2t > 0.0 {
                Task::I2T
            } else {
                Task::T2I
            }
        } else {
            Task::IT2IT
        }
    }
}

/// Coefficients of the length, unroll and MixSel terms.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Lambdas {
    pub tl: f64,
    pub um: f64,
    pub ms: f64,
}

impl Default for Lambdas {
    fn default() -> Self {
        Self {
            tl: 0.01,
            um: 1.0,
            ms: 0.5,
        }
    }
}

/// Which terms a batch of a given task contributes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TermSet {
    pub mask: bool,
    pub length: bool,
    pub unroll: bool,
    pub mixsel: bool,
}

/// Length only off T2I, unroll only off IT2IT, MixSel always; a zero
/// coefficient drops its term.
pub fn active_terms(task: Task, lambdas: &Lambdas) -> TermSet {
    TermSet {
        mask: true,
        length: task != Task::T2I && lambdas.tl != 0.0,
        unroll: task != Task::IT2IT && lambdas.um != 0.0,
        mixsel: lambdas.ms != 0.0,
    }
}

/// A training sample in token form.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Encoded {
    pub x: Vec<TokenId>,
    /// `N_T` ids, PAD after the caption.
    pub y: Vec<TokenId>,
    pub len: usize,
}

pub fn encode_samples(samples: &[Sample], layout: &Layout) -> Result<Vec<Encoded>> {
    let codec = TextCodec::new(layout.n_text);
    samples
        .iter()
        .map(|s| {
            if s.image.size() != layout.grid {
                return Err(Error::Contract(format!(
                    "grid {} in data, {} in config",
                    s.image.size(),
                    layout.grid
                )));
            }
            let (y, len) = codec.encode(&s.caption)?;
            Ok(Encoded {
                x: s.image.encode(),
                y,
                len,
            })
        })
        .collect()
}

/// Inputs and supervised rows of one loss term.
///
/// Loss = `(Σ w·CE(logits[row], target) + Σ CE(length, len−1)) / norm`.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct TermBatch {
    pub ids: Vec<TokenId>,
    pub batch: usize,
    pub rows: Vec<usize>,
    pub targets: Vec<TokenId>,
    pub weights: Vec<f64>,
    /// Length-class targets (`len − 1`), one per sequence.
    pub length_targets: Option<Vec<usize>>,
    pub norm: f64,
}

impl TermBatch {
    fn push_seq(&mut self, seq: &[TokenId]) -> usize {
        let base = self.ids.len();
        self.ids.extend_from_slice(seq);
        self.batch += 1;
        base
    }

    fn push_target(&mut self, row: usize, target: TokenId, weight: f64) {
        self.rows.push(row);
        self.targets.push(target);
        self.weights.push(weight);
    }

    pub fn seq_len(&self) -> usize {
        if self.batch == 0 {
            0
        } else {
            self.ids.len() / self.batch
        }
    }

    pub fn sequence(&self, b: usize) -> &[TokenId] {
        let s = self.seq_len();
        &self.ids[b * s..(b + 1) * s]
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty() && self.length_targets.is_none()
    }
}

fn check_plan(task: Task, plan: &MaskPlan, n_image: usize, len: usize) -> Result<()> {
    if !task.masks_image() && !plan.image.is_empty() {
        return Err(Error::Contract(format!("{} plan masks image tokens", task.name())));
    }
    if !task.masks_text() && !plan.text.is_empty() {
        return Err(Error::Contract(format!("{} plan masks text tokens", task.name())));
    }
    if plan.image.iter().any(|&i| i >= n_image) || plan.text.iter().any(|&j| j >= len) {
        return Err(Error::Contract("plan offset outside the modality block".into()));
    }
    Ok(())
}

/// Lays out one sequence with `plan` applied and records its targets.
#[allow(clippy::too_many_arguments)]
fn push_masked(
    tb: &mut TermBatch,
    layout: &Layout,
    x: &[TokenId],
    y: &[TokenId],
    sel_i: TokenId,
    sel_t: TokenId,
    image: &[usize],
    text: &[usize],
) -> Result<()> {
    let mut seq = TokenSequence::build(*layout, x, y, sel_i, sel_t)?;
    for &i in image {
        seq.set_image(i, MASK);
    }
    for &j in text {
        seq.set_text(j, MASK);
    }
    let base = tb.push_seq(&seq.ids);
    for &i in image {
        tb.push_target(base + layout.image_pos(i), x[i], 1.0);
    }
    for &j in text {
        tb.push_target(base + layout.text_pos(j), y[j], 1.0);
    }
    Ok(())
}

/// Masked-token NLL inputs: image positions for T2I, text for I2T, both for IT2IT.
pub fn mask_term(layout: &Layout, items: &[&Encoded], task: Task, plans: &[MaskPlan]) -> Result<TermBatch> {
    if items.len() != plans.len() {
        return Err(Error::Contract(format!("{} samples, {} plans", items.len(), plans.len())));
    }
    let mut tb = TermBatch {
        norm: items.len() as f64,
        ..Default::default()
    };
    for (e, p) in items.iter().zip(plans) {
        check_plan(task, p, layout.n_image(), e.len)?;
        push_masked(&mut tb, layout, &e.x, &e.y, NONE, NONE, &p.image, &p.text)?;
    }
    Ok(tb)
}

/// Length-head inputs: every text slot MASK, the image as in the task's plan.
pub fn length_term(layout: &Layout, items: &[&Encoded], task: Task, plans: &[MaskPlan]) -> Result<TermBatch> {
    if task == Task::T2I {
        return Err(Error::Contract("length loss is not used for t2i".into()));
    }
    if items.len() != plans.len() {
        return Err(Error::Contract(format!("{} samples, {} plans", items.len(), plans.len())));
    }
    let mut tb = TermBatch {
        norm: items.len() as f64,
        ..Default::default()
    };
    let all_text = vec![MASK; layout.n_text];
    let mut lens = Vec::with_capacity(items.len());
    for (e, p) in items.iter().zip(plans) {
        check_plan(task, p, layout.n_image(), e.len)?;
        let mut seq = TokenSequence::plain(*layout, &e.x, &all_text)?;
        for &i in &p.image {
            seq.set_image(i, MASK);
        }
        tb.push_seq(&seq.ids);
        lens.push(e.len - 1);
    }
    tb.length_targets = Some(lens);
    Ok(tb)
}

/// Bookkeeping of one unrolled sample, for inspection.
#[derive(Clone, Debug, PartialEq)]
pub struct UnrollRecord {
    pub first_count: usize,
    pub r_prev: f64,
    pub r: f64,
    /// The first-pass input with masked slots filled by samples.
    pub unrolled: Vec<TokenId>,
    pub remasked: Vec<usize>,
}

/// Second pass of the unrolled objective.
///
/// `first` holds logits of the model on `first_input` (built by
/// [`mask_term`] from `plans`); they are only sampled from, so nothing
/// upstream of this function sees a gradient.
#[allow(clippy::too_many_arguments)]
pub fn unroll_term<T: Scalar, R: Rng>(
    layout: &Layout,
    items: &[&Encoded],
    task: Task,
    plans: &[MaskPlan],
    first_input: &TermBatch,
    first: &Inference<T>,
    schedules: Schedules,
    rng: &mut R,
) -> Result<(TermBatch, Vec<UnrollRecord>)> {
    if task == Task::IT2IT {
        return Err(Error::Contract("unroll loss is not used for it2it".into()));
    }
    if items.len() != plans.len() || first_input.batch != items.len() {
        return Err(Error::Contract("unroll inputs disagree in batch size".into()));
    }
    let mut tb = TermBatch {
        norm: items.len() as f64,
        ..Default::default()
    };
    let mut records = Vec::with_capacity(items.len());
    for (b, (e, p)) in items.iter().zip(plans).enumerate() {
        check_plan(task, p, layout.n_image(), e.len)?;
        let mut seq = first_input.sequence(b).to_vec();
        let (offsets, range, n, schedule, r_prev) = if task == Task::T2I {
            (&p.image, IMAGE_RANGE, layout.n_image(), schedules.image, p.r_image)
        } else {
            (&p.text, WORD_RANGE, e.len, schedules.text, p.r_text)
        };
        let pos_of = |o: usize| {
            if task == Task::T2I {
                layout.image_pos(o)
            } else {
                layout.text_pos(o)
            }
        };
        for &o in offsets {
            let (id, _) = sample_range(first.row(b, pos_of(o)), range, 1.0, rng);
            seq[pos_of(o)] = id;
        }
        let unrolled = seq.clone();
        let r_prev = r_prev.unwrap_or(0.0);
        let rm = unroll_remask(rng, r_prev, n, offsets.len(), schedule);
        for &o in &rm.positions {
            seq[pos_of(o)] = MASK;
        }
        let base = tb.push_seq(&seq);
        for &o in &rm.positions {
            let target = if task == Task::T2I { e.x[o] } else { e.y[o] };
            tb.push_target(base + pos_of(o), target, 1.0);
        }
        records.push(UnrollRecord {
            first_count: offsets.len(),
            r_prev,
            r: rm.r,
            unrolled,
            remasked: rm.positions,
        });
    }
    Ok((tb, records))
}

/// Which half of a mixed pair is the target, and how images are split.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MixChoice {
    /// 0 selects the first sample of the pair, 1 the second.
    pub select: usize,
    pub axis: MixAxis,
}

impl MixChoice {
    pub fn image_selector(&self) -> TokenId {
        special(match (self.axis, self.select) {
            (MixAxis::Horizontal, 0) => Special::Left,
            (MixAxis::Horizontal, _) => Special::Right,
            (MixAxis::Vertical, 0) => Special::Top,
            (MixAxis::Vertical, _) => Special::Bottom,
        })
    }

    pub fn text_selector(&self) -> TokenId {
        special(if self.select == 0 { Special::Left } else { Special::Right })
    }
}

pub fn mixed_image_ids(layout: &Layout, a: &[TokenId], b: &[TokenId], axis: MixAxis) -> Result<Vec<TokenId>> {
    let ga = GridImage::decode(layout.grid, a)?;
    let gb = GridImage::decode(layout.grid, b)?;
    Ok(mix_images(&ga, &gb, axis)?.encode())
}

/// MixSel inputs for pairs of samples.
///
/// I2T: mixed image plus image selector, target the selected caption.
/// T2I: mixed caption plus text selector, target the selected image.
/// IT2IT: one sequence of each kind per pair, sharing the selected index;
/// `plans[i].text` drives the first and `plans[i].image` the second.
pub fn mixsel_term(
    layout: &Layout,
    pairs: &[(&Encoded, &Encoded)],
    task: Task,
    choices: &[MixChoice],
    plans: &[MaskPlan],
) -> Result<TermBatch> {
    if pairs.len() != choices.len() || pairs.len() != plans.len() {
        return Err(Error::Contract("mixsel inputs disagree in length".into()));
    }
    let mut tb = TermBatch {
        norm: pairs.len() as f64,
        ..Default::default()
    };
    for ((&(a, b), c), p) in pairs.iter().zip(choices).zip(plans) {
        let sel = if c.select == 0 { a } else { b };
        check_plan(task, p, layout.n_image(), sel.len)?;
        if task.masks_text() {
            let x = mixed_image_ids(layout, &a.x, &b.x, c.axis)?;
            push_masked(&mut tb, layout, &x, &sel.y, c.image_selector(), NONE, &[], &p.text)?;
        }
        if task.masks_image() {
            let (y, _) = mix_texts(&a.y, &b.y, layout.n_text);
            push_masked(&mut tb, layout, &sel.x, &y, NONE, c.text_selector(), &p.image, &[])?;
        }
    }
    Ok(tb)
}

/// Pairs batch members after a shuffle and draws a choice and plan per pair.
#[allow(clippy::type_complexity)]
pub fn sample_mixsel<R: Rng>(
    rng: &mut R,
    layout: &Layout,
    items: &[&Encoded],
    task: Task,
    schedules: Schedules,
) -> Result<(Vec<(usize, usize)>, Vec<MixChoice>, Vec<MaskPlan>)> {
    if items.len() % 2 != 0 {
        return Err(Error::Contract(format!("mixsel needs an even batch, got {}", items.len())));
    }
    let mut order: Vec<usize> = (0..items.len()).collect();
    order.shuffle(rng);
    let mut pairs = Vec::with_capacity(items.len() / 2);
    let mut choices = Vec::with_capacity(items.len() / 2);
    let mut plans = Vec::with_capacity(items.len() / 2);
    for w in order.chunks_exact(2) {
        let c = MixChoice {
            select: rng.gen_range(0..2),
            axis: if rng.gen::<bool>() {
                MixAxis::Horizontal
            } else {
                MixAxis::Vertical
            },
        };
        let sel = items[w[c.select]];
        plans.push(sample_training_mask(rng, layout.n_image(), sel.len, task, schedules));
        pairs.push((w[0], w[1]));
        choices.push(c);
    }
    Ok((pairs, choices, plans))
}

/// Sequence order used by the causal baseline for a direction.
pub fn ar_layout(layout: &Layout, direction: Task) -> Result<Layout> {
    match direction {
        Task::T2I => Ok(layout.with_order(Order::TextFirst)),
        Task::I2T => Ok(layout.with_order(Order::ImageFirst)),
        Task::IT2IT => Err(Error::Contract("the causal baseline has no joint direction".into())),
    }
}

/// Next-token targets over the whole sequence, weighted by modality.
///
/// Special-token targets are fixed by the layout and skipped; among text
/// slots only the words and the first PAD (the end marker) are targets.
pub fn ar_term(layout: &Layout, items: &[&Encoded], direction: Task, gen_weight: f64, cond_weight: f64) -> Result<TermBatch> {
    let layout = ar_layout(layout, direction)?;
    let gen = if direction == Task::T2I {
        Modality::Image
    } else {
        Modality::Text
    };
    let mut tb = TermBatch {
        norm: items.len() as f64,
        ..Default::default()
    };
    for e in items {
        let seq = TokenSequence::plain(layout, &e.x, &e.y)?;
        let base = tb.push_seq(&seq.ids);
        for t in 1..seq.ids.len() {
            let m = layout.modality(t);
            if m == Modality::Special {
                continue;
            }
            if m == Modality::Text && t - layout.text_pos(0) > e.len {
                continue;
            }
            let w = if m == gen { gen_weight } else { cond_weight };
            if w != 0.0 {
                tb.push_target(base + t - 1, seq.ids[t], w);
            }
        }
    }
    Ok(tb)
}

/// Builds the scalar loss of a term on `tape`.
pub fn term_loss<T: Scalar>(
    tape: &mut Tape<T>,
    vars: &[Var],
    config: &ModelConfig,
    length_pos: usize,
    tb: &TermBatch,
    smoothing: f64,
) -> Result<Var> {
    if tb.is_empty() || tb.batch == 0 {
        return Ok(tape.constant(Tensor::scalar(T::zero())));
    }
    let out = forward(tape, vars, config, &tb.ids, tb.batch, tb.length_targets.as_ref().map(|_| length_pos))?;
    loss_on(tape, &out, tb, smoothing)
}

/// The loss of `tb` on an existing forward output (which must have come
/// from `tb.ids`, with length logits when `tb` has length targets).
pub fn loss_on<T: Scalar>(tape: &mut Tape<T>, out: &ForwardOut, tb: &TermBatch, smoothing: f64) -> Result<Var> {
    if tb.is_empty() || tb.batch == 0 {
        return Ok(tape.constant(Tensor::scalar(T::zero())));
    }
    let mut parts = Vec::new();
    if !tb.rows.is_empty() {
        let w: Vec<T> = tb.weights.iter().map(|&w| T::from_f64_lossy(w)).collect();
        parts.push(tape.cross_entropy(out.logits, &tb.rows, &tb.targets, &w, T::from_f64_lossy(smoothing))?);
    }
    if let (Some(lt), Some(ll)) = (&tb.length_targets, out.length_logits) {
        let rows: Vec<usize> = (0..lt.len()).collect();
        let ones = vec![T::one(); lt.len()];
        parts.push(tape.cross_entropy(ll, &rows, lt, &ones, T::zero())?);
    }
    let mut total = parts[0];
    for &p in &parts[1..] {
        total = tape.add(total, p)?;
    }
    Ok(tape.scale(total, T::from_f64_lossy(1.0 / tb.norm))?)
}

/// Causal-baseline loss; refuses bidirectional models.
pub fn ar_loss<T: Scalar>(tape: &mut Tape<T>, vars: &[Var], config: &ModelConfig, tb: &TermBatch) -> Result<Var> {
    if config.attention != Attention::Causal {
        return Err(Error::Contract("the autoregressive loss needs a causal model".into()));
    }
    term_loss(tape, vars, config, 0, tb, 0.0)
}

/// Plain loss value of a term (no gradient).
pub fn term_value<T: Scalar>(params: &ModelParams<T>, layout: &Layout, tb: &TermBatch, smoothing: f64) -> Result<f64> {
    let mut tape = Tape::new();
    let vars = params.register(&mut tape, false);
    let l = term_loss(&mut tape, &vars, &params.config, layout.bot(), tb, smoothing)?;
    Ok(tape.value(l).item().to_f64().unwrap())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Objective {
    Masked,
    Autoregressive,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub layout: Layout,
    pub objective: Objective,
    pub tasks: TaskWeights,
    pub lambdas: Lambdas,
    pub schedules: Schedules,
    pub batch: usize,
    pub steps: u64,
    pub base_lr: f64,
    pub warmup_frac: f64,
    pub lr_floor: f64,
    pub clip: f64,
    pub smoothing: f64,
    pub adamw: AdamWConfig,
    pub seed: u64,
    pub ar_gen_weight: f64,
    pub ar_cond_weight: f64,
}

impl TrainConfig {
    pub fn warmup_steps(&self) -> u64 {
        (self.warmup_frac * self.steps as f64).round() as u64
    }

    pub fn lr_schedule(&self) -> Result<CosineSchedule> {
        Ok(CosineSchedule::new(self.base_lr, self.warmup_steps(), self.steps, self.lr_floor)?)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.model.seq_len != self.layout.seq_len() || self.model.max_text != self.layout.n_text {
            return Err(Error::config("grid", "model sequence does not match the layout"));
        }
        let want = match self.objective {
            Objective::Masked => Attention::Bidirectional,
            Objective::Autoregressive => Attention::Causal,
        };
        if self.model.attention != want {
            return Err(Error::config("attention", format!("{:?} objective needs {want:?} attention", self.objective)));
        }
        if self.batch == 0 {
            return Err(Error::config("batch", "must be positive"));
        }
        if self.lambdas.ms != 0.0 && self.objective == Objective::Masked && self.batch % 2 != 0 {
            return Err(Error::config("batch", "MixSel pairs samples, so the batch must be even"));
        }
        if !(self.clip > 0.0) {
            return Err(Error::config("clip", "must be positive"));
        }
        if !(0.0..1.0).contains(&self.smoothing) {
            return Err(Error::config("smoothing", "must lie in [0, 1)"));
        }
        if !(0.0..=1.0).contains(&self.warmup_frac) {
            return Err(Error::config("warmup_frac", "must lie in [0, 1]"));
        }
        self.lr_schedule()?;
        Ok(())
    }
}

/// Per-step record of every loss term.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub step: u64,
    pub task: Task,
    pub lr: f64,
    /// Masked NLL, or the next-token NLL for the causal baseline.
    pub mask: f64,
    pub length: Option<f64>,
    pub unroll: Option<f64>,
    pub mixsel: Option<f64>,
    pub total: f64,
    pub grad_norm: f64,
    pub skipped: bool,
}

impl LossReport {
    /// The weighted composite from the individual terms.
    pub fn composed(&self, l: &Lambdas) -> f64 {
        self.mask
            + self.length.map_or(0.0, |v| l.tl * v)
            + self.unroll.map_or(0.0, |v| l.um * v)
            + self.mixsel.map_or(0.0, |v| l.ms * v)
    }

    pub const CSV_HEADER: &'static str = "step,task,lr,mask,length,unroll,mixsel,total,grad_norm,skipped";

    pub fn csv_row(&self) -> String {
        let o = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        format!(
            "{},{},{},{},{},{},{},{},{},{}",
            self.step,
            self.task.name(),
            self.lr,
            self.mask,
            o(self.length),
            o(self.unroll),
            o(self.mixsel),
            self.total,
            self.grad_norm,
            self.skipped as u8
        )
    }
}

const STEP_STREAM: u64 = 0x5745_4550;

/// One mutable training context.
pub struct Trainer {
    pub config: TrainConfig,
    pub params: ModelParams<f32>,
    pub opt: AdamW<f32>,
    schedule: CosineSchedule,
    decay: Vec<bool>,
    /// Completed steps, including skipped ones.
    pub step: u64,
    pub skipped: u64,
}

impl Trainer {
    pub fn new(config: TrainConfig, params: ModelParams<f32>) -> Result<Self> {
        let opt = AdamW::new(config.adamw, &params.tensors);
        Self::resume(config, params, opt, 0)
    }

    pub fn resume(config: TrainConfig, params: ModelParams<f32>, opt: AdamW<f32>, step: u64) -> Result<Self> {
        config.validate()?;
        if params.config != config.model {
            return Err(Error::Contract("parameters were built for a different model config".into()));
        }
        if opt.m.len() != params.tensors.len()
            || opt.m.iter().zip(&params.tensors).any(|(m, p)| m.shape() != p.shape())
        {
            return Err(Error::Contract("optimizer state does not match the parameters".into()));
        }
        let schedule = config.lr_schedule()?;
        let decay = params.decay_mask();
        Ok(Self {
            config,
            params,
            opt,
            schedule,
            decay,
            step,
            skipped: 0,
        })
    }

    fn accumulate(&self, acc: &mut [Tensor<f32>], tb: &TermBatch, lambda: f64) -> Result<f64> {
        let mut tape = Tape::new();
        let vars = self.params.register(&mut tape, true);
        let cfg = &self.params.config;
        let loss = match self.config.objective {
            Objective::Masked => term_loss(&mut tape, &vars, cfg, self.config.layout.bot(), tb, self.config.smoothing)?,
            Objective::Autoregressive => ar_loss(&mut tape, &vars, cfg, tb)?,
        };
        let value = tape.value(loss).item() as f64;
        if !tape.requires_grad(loss) {
            return Ok(value);
        }
        let scaled = tape.scale(loss, lambda as f32)?;
        let mut grads = tape.backward(scaled)?;
        for (a, &v) in acc.iter_mut().zip(&vars) {
            if let Some(g) = grads.take(v) {
                for (x, y) in a.data_mut().iter_mut().zip(g.data()) {
                    *x += *y;
                }
            }
        }
        Ok(value)
    }

    /// Samples a batch and a task, builds the active terms, and updates.
    pub fn train_step(&mut self, data: &[Encoded]) -> Result<LossReport> {
        if data.is_empty() {
            return Err(Error::Contract("no training data".into()));
        }
        let cfg = self.config.clone();
        let layout = cfg.layout;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, STEP_STREAM, self.step));
        let items: Vec<&Encoded> = (0..cfg.batch).map(|_| &data[rng.gen_range(0..data.len())]).collect();
        let mut acc: Vec<Tensor<f32>> = self.params.tensors.iter().map(|t| Tensor::zeros(t.shape())).collect();
        let mut report = LossReport {
            step: self.step,
            task: Task::T2I,
            lr: self.schedule.lr(self.step),
            mask: 0.0,
            length: None,
            unroll: None,
            mixsel: None,
            total: 0.0,
            grad_norm: 0.0,
            skipped: false,
        };
        match cfg.objective {
            Objective::Masked => {
                let task = cfg.tasks.sample(&mut rng);
                report.task = task;
                let terms = active_terms(task, &cfg.lambdas);
                let n_i = layout.n_image();
                let plans: Vec<MaskPlan> = items
                    .iter()
                    .map(|e| sample_training_mask(&mut rng, n_i, e.len, task, cfg.schedules))
                    .collect();
                let tb = mask_term(&layout, &items, task, &plans)?;
                report.mask = self.accumulate(&mut acc, &tb, 1.0)?;
                if terms.length {
                    let tb = length_term(&layout, &items, task, &plans)?;
                    report.length = Some(self.accumulate(&mut acc, &tb, cfg.lambdas.tl)?);
                }
                if terms.unroll {
                    let plans: Vec<MaskPlan> = items
                        .iter()
                        .map(|e| sample_training_mask(&mut rng, n_i, e.len, task, cfg.schedules))
                        .collect();
                    let first_in = mask_term(&layout, &items, task, &plans)?;
                    let first = self.params.infer(&first_in.ids, first_in.batch, None)?;
                    let (tb, _) = unroll_term(&layout, &items, task, &plans, &first_in, &first, cfg.schedules, &mut rng)?;
                    report.unroll = Some(self.accumulate(&mut acc, &tb, cfg.lambdas.um)?);
                }
                if terms.mixsel {
                    let (pairs, choices, plans) = sample_mixsel(&mut rng, &layout, &items, task, cfg.schedules)?;
                    let pairs: Vec<(&Encoded, &Encoded)> = pairs.iter().map(|&(a, b)| (items[a], items[b])).collect();
                    let tb = mixsel_term(&layout, &pairs, task, &choices, &plans)?;
                    report.mixsel = Some(self.accumulate(&mut acc, &tb, cfg.lambdas.ms)?);
                }
            }
            Objective::Autoregressive => {
                let p_t2i = if cfg.tasks.t2i + cfg.tasks.i2t > 0.0 {
                    cfg.tasks.t2i / (cfg.tasks.t2i + cfg.tasks.i2t)
                } else {
                    0.5
                };
                let direction = if rng.gen::<f64>() < p_t2i { Task::T2I } else { Task::I2T };
                report.task = direction;
                let tb = ar_term(&layout, &items, direction, cfg.ar_gen_weight, cfg.ar_cond_weight)?;
                report.mask = self.accumulate(&mut acc, &tb, 1.0)?;
            }
        }
        report.total = report.composed(&cfg.lambdas);
        let finite = report.total.is_finite() && acc.iter().all(|t| t.is_finite());
        if finite {
            let (_, norm) = clip_grad_norm(&mut acc, cfg.clip);
            report.grad_norm = norm;
            self.opt.step(&mut self.params.tensors, &acc, &self.decay, report.lr)?;
        } else {
            report.skipped = true;
            self.skipped += 1;
            log::warn!("step {}: non-finite loss or gradient, update skipped ({} so far)", self.step, self.skipped);
        }
        self.step += 1;
        Ok(report)
    }
}

/// Files written by [`run_training`].
#[derive(Clone, Debug)]
pub struct RunPaths {
    pub dir: PathBuf,
}

impl RunPaths {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        Self { dir: dir.into() }
    }
    pub fn checkpoint(&self) -> PathBuf {
        self.dir.join("model.ckpt")
    }
    pub fn optimizer(&self) -> PathBuf {
        self.dir.join("model.opt")
    }
    pub fn metrics(&self) -> PathBuf {
        self.dir.join("metrics.csv")
    }
    /// Wall-clock per step; kept apart so `metrics.csv` stays reproducible.
    pub fn timing(&self) -> PathBuf {
        self.dir.join("timing.csv")
    }
}

/// Provenance carried into every checkpoint.
#[derive(Clone, Debug, Default)]
pub struct Provenance {
    pub run_config: String,
    pub config_hash: String,
}

pub fn save_state(paths: &RunPaths, trainer: &Trainer, prov: &Provenance) -> Result<()> {
    let ck = encode_checkpoint(&trainer.params, &prov.run_config, &prov.config_hash, trainer.step);
    write_atomic(&paths.checkpoint(), &ck)?;
    write_atomic(&paths.optimizer(), &encode_optimizer(&trainer.opt))
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<(ModelParams<f32>, crate::model::CheckpointHeader)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}

/// Keeps only metric rows from steps before `step`.
fn truncate_csv(path: &Path, step: u64) -> Result<()> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = String::new();
    for (i, line) in text.lines().enumerate() {
        let keep = i == 0
            || line
                .split(',')
                .next()
                .and_then(|s| s.parse::<u64>().ok())
                .is_some_and(|s| s < step);
        if keep {
            out.push_str(line);
            out.push('\n');
        }
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Fresh parameters for a run; the seed is derived from the run seed.
pub fn init_params(config: &TrainConfig) -> Result<ModelParams<f32>> {
    ModelParams::init(config.model, derive_seed(config.seed, 1, 0))
}

/// Trains to `config.steps`, appending metrics and checkpointing every
/// `checkpoint_every` steps and at the end. With `resume`, continues from
/// the checkpoint in `paths` if there is one.
pub fn run_training(
    config: TrainConfig,
    data: &[Encoded],
    paths: &RunPaths,
    checkpoint_every: u64,
    prov: &Provenance,
    resume: bool,
    mut on_step: impl FnMut(&LossReport),
) -> Result<Trainer> {
    fs::create_dir_all(&paths.dir).map_err(|e| Error::io(&paths.dir, e))?;
    let mut trainer = if resume && paths.checkpoint().exists() && paths.optimizer().exists() {
        let (params, header) = load_checkpoint(&paths.checkpoint())?;
        let opt_path = paths.optimizer();
        let opt = decode_optimizer(&fs::read(&opt_path).map_err(|e| Error::io(&opt_path, e))?)?;
        log::info!("resuming from step {}", header.step);
        for p in [paths.metrics(), paths.timing()] {
            if p.exists() {
                truncate_csv(&p, header.step)?;
            }
        }
        Trainer::resume(config, params, opt, header.step)?
    } else {
        let params = init_params(&config)?;
        let mut m = fs::File::create(paths.metrics()).map_err(|e| Error::io(paths.metrics(), e))?;
        writeln!(m, "{}", LossReport::CSV_HEADER).map_err(|e| Error::io(paths.metrics(), e))?;
        let mut t = fs::File::create(paths.timing()).map_err(|e| Error::io(paths.timing(), e))?;
        writeln!(t, "step,wall_ms").map_err(|e| Error::io(paths.timing(), e))?;
        Trainer::new(config, params)?
    };
    let open = |p: PathBuf| {
        fs::OpenOptions::new()
            .append(true)
            .open(&p)
            .map_err(|e| Error::io(&p, e))
    };
    let mut metrics = open(paths.metrics())?;
    let mut timing = open(paths.timing())?;
    while trainer.step < trainer.config.steps {
        let t0 = std::time::Instant::now();
        let report = trainer.train_step(data)?;
        let ms = t0.elapsed().as_secs_f64() * 1e3;
        writeln!(metrics, "{}", report.csv_row()).map_err(|e| Error::io(paths.metrics(), e))?;
        writeln!(timing, "{},{ms:.3}", report.step).map_err(|e| Error::io(paths.timing(), e))?;
        on_step(&report);
        if checkpoint_every > 0 && trainer.step % checkpoint_every == 0 && trainer.step < trainer.config.steps {
            save_state(paths, &trainer, prov)?;
        }
    }
    save_state(paths, &trainer, prov)?;
    Ok(trainer)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vocab::PAD;

    #[test]
    fn task_weights_parse_and_normalize() {
        let w = TaskWeights::parse("8:1:1").unwrap();
        assert!((w.t2i - 0.8).abs() < 1e-15 && (w.i2t - 0.1).abs() < 1e-15);
        assert!(TaskWeights::parse("1:0").is_err());
        assert!(TaskWeights::parse("0:0:0").is_err());
        assert!(TaskWeights::parse("1:-1:1").is_err());
        let only = TaskWeights::parse("0:1:0").unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!((0..1000).all(|_| only.sample(&mut rng) == Task::I2T));
    }

    #[test]
    fn indicator_table() {
        let l = Lambdas::default();
        let t = active_terms(Task::T2I, &l);
        assert!(t.mask && !t.length && t.unroll && t.mixsel);
        let t = active_terms(Task::I2T, &l);
        assert!(t.length && t.unroll && t.mixsel);
        let t = active_terms(Task::IT2IT, &l);
        assert!(t.length && !t.unroll && t.mixsel);
        let zero = Lambdas { tl: 0.0, um: 0.0, ms: 0.0 };
        let t = active_terms(Task::I2T, &zero);
        assert!(t.mask && !t.length && !t.unroll && !t.mixsel);
    }

    #[test]
    fn ar_targets_skip_specials_and_trailing_pad() {
        let layout = Layout::new(2, 4);
        let e = Encoded {
            x: vec![0, 1, 2, 3],
            y: vec![TEXT_BASE, TEXT_BASE + 1, PAD, PAD],
            len: 2,
        };
        let tb = ar_term(&layout, &[&e], Task::I2T, 0.9, 0.1).unwrap();
        // image-first: BOI SEL x0..x3 BOT SEL y0 y1 PAD PAD, predicted from one slot earlier
        let got: Vec<(usize, usize, f64)> = tb
            .rows
            .iter()
            .zip(&tb.targets)
            .zip(&tb.weights)
            .map(|((&r, &t), &w)| (r, t, w))
            .collect();
        assert_eq!(
            got,
            vec![(1, 0, 0.1), (2, 1, 0.1), (3, 2, 0.1), (4, 3, 0.1), (7, TEXT_BASE, 0.9), (8, TEXT_BASE + 1, 0.9), (9, PAD, 0.9)]
        );
        assert!(ar_term(&layout, &[&e], Task::IT2IT, 0.9, 0.1).is_err());
    }
}
