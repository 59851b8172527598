//! Iterative mask-predict decoding, the causal one-token-at-a-time
//! baseline, and likelihood reranking.
//!
//! Image tokens, once committed, are frozen. Text tokens stay candidates
//! for re-masking on every step. Every model call is counted.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use magvlt_ndnum::Scalar;

use crate::error::{Error, Result};
use crate::mask::{decode_mask_count, select_lowest, Schedules, Task};
use crate::model::{Attention, ModelParams};
use crate::sampling::{argmax, gumbel, range_log_probs, sample_range};
use crate::synth::derive_seed;
use crate::train::{ar_layout, IMAGE_RANGE, WORD_RANGE};
use crate::vocab::{GridImage, Layout, TextCodec, TokenId, TokenSequence, MASK, NONE, PAD};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleRequest {
    pub k_image: usize,
    pub k_text: usize,
    pub k_joint: usize,
    pub temp_image: f64,
    pub temp_text: f64,
    /// Gumbel scale on image confidences, annealed linearly to zero.
    pub conf_noise: f64,
    pub candidates: usize,
    /// Inclusive range of the initial caption length in joint generation.
    pub joint_len: (usize, usize),
    pub schedules: Schedules,
    pub seed: u64,
}

impl Default for SampleRequest {
    fn default() -> Self {
        Self {
            k_image: 10,
            k_text: 12,
            k_joint: 12,
            temp_image: 1.0,
            temp_text: 0.7,
            conf_noise: 2.0,
            candidates: 1,
            joint_len: (2, 12),
            schedules: Schedules::default(),
            seed: 0,
        }
    }
}

impl SampleRequest {
    pub fn validate(&self) -> Result<()> {
        for (k, v) in [("k_image", self.k_image), ("k_text", self.k_text), ("k_joint", self.k_joint), ("candidates", self.candidates)] {
            if v == 0 {
                return Err(Error::config(k, "must be at least 1"));
            }
        }
        if self.joint_len.0 == 0 || self.joint_len.0 > self.joint_len.1 {
            return Err(Error::config("joint_len_min", "range is empty or starts at 0"));
        }
        for (k, v) in [("temp_image", self.temp_image), ("temp_text", self.temp_text), ("conf_noise", self.conf_noise)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::config(k, "must be finite and non-negative"));
            }
        }
        Ok(())
    }
}

/// State of one refinement step, recorded after it completes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepTrace {
    pub k: usize,
    /// Image tokens still MASK entering the step.
    pub image_masked_before: usize,
    pub image_masked_after: usize,
    pub image_frozen: usize,
    pub text_masked_before: usize,
    pub text_masked_after: usize,
    pub text_len: Option<usize>,
    /// `(offset, confidence)` of every candidate scored on this step.
    pub confidences: Vec<(usize, f64)>,
    /// The whole sequence after the step.
    pub tokens: Vec<TokenId>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DecodeTrace {
    pub forwards: usize,
    pub predicted_len: Option<usize>,
    pub steps: Vec<StepTrace>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecodeOutput {
    pub seq: TokenSequence,
    pub trace: DecodeTrace,
}

impl DecodeOutput {
    pub fn image(&self) -> Result<GridImage> {
        GridImage::decode(self.seq.layout.grid, self.seq.image_tokens())
    }

    pub fn caption(&self) -> Result<String> {
        TextCodec::new(self.seq.layout.n_text).decode(self.seq.text_tokens())
    }
}

fn check_params<T: Scalar>(params: &ModelParams<T>, layout: &Layout, want: Attention) -> Result<()> {
    if params.config.attention != want {
        return Err(Error::Contract(format!("decoder needs {want:?} attention")));
    }
    if params.config.seq_len != layout.seq_len() || params.config.max_text != layout.n_text {
        return Err(Error::Contract("model and layout disagree on sequence shape".into()));
    }
    if !params.is_finite() {
        return Err(Error::Generation("parameters contain non-finite values".into()));
    }
    Ok(())
}

fn blank_text(layout: &Layout) -> Vec<TokenId> {
    vec![PAD; layout.n_text]
}

fn blank_image(layout: &Layout) -> Vec<TokenId> {
    vec![MASK; layout.n_image()]
}

/// Image refinement over `region` (image offsets): all of it starts
/// masked, `k_total` forwards, freeze cap on every step.
fn image_loop<T: Scalar, R: Rng>(
    params: &ModelParams<T>,
    seq: &mut TokenSequence,
    region: &[usize],
    k_total: usize,
    req: &SampleRequest,
    rng: &mut R,
    trace: &mut DecodeTrace,
) -> Result<()> {
    let layout = seq.layout;
    let n = region.len();
    let mut masked: Vec<usize> = region.to_vec();
    masked.sort_unstable();
    masked.dedup();
    for &o in &masked {
        seq.set_image(o, MASK);
    }
    let mut conf = vec![f64::INFINITY; layout.n_image()];
    let mut sampled = vec![MASK; layout.n_image()];
    for k in 0..k_total {
        let inf = params.infer(&seq.ids, 1, None)?;
        trace.forwards += 1;
        let noise = req.conf_noise * (1.0 - (k + 1) as f64 / k_total as f64);
        for &o in &masked {
            let (id, lp) = sample_range(inf.row(0, layout.image_pos(o)), IMAGE_RANGE, req.temp_image, rng);
            sampled[o] = id;
            conf[o] = lp + if noise > 0.0 { noise * gumbel(rng) } else { 0.0 };
        }
        let c = decode_mask_count(req.schedules.image, k + 1, k_total, n, masked.len())?;
        let keep = select_lowest(&conf, &masked, c)?;
        let before = masked.len();
        let confidences = masked.iter().map(|&o| (o, conf[o])).collect();
        for &o in &masked {
            if keep.binary_search(&o).is_err() {
                seq.set_image(o, sampled[o]);
            }
        }
        masked = keep;
        trace.steps.push(StepTrace {
            k,
            image_masked_before: before,
            image_masked_after: masked.len(),
            image_frozen: layout.n_image() - masked.len(),
            text_masked_before: 0,
            text_masked_after: 0,
            text_len: None,
            confidences,
            tokens: seq.ids.clone(),
        });
    }
    Ok(())
}

/// Probability of each active text slot's current token under `inf`.
fn text_confidence<T: Scalar>(
    inf: &crate::model::Inference<T>,
    layout: &Layout,
    seq: &TokenSequence,
    active: &[usize],
    conf: &mut [f64],
) {
    for &j in active {
        let cur = seq.ids[layout.text_pos(j)];
        let lp = range_log_probs(inf.row(0, layout.text_pos(j)), WORD_RANGE, 1.0);
        conf[j] = lp
            .iter()
            .find(|p| p.0 == cur)
            .map_or(f64::NEG_INFINITY, |p| p.1.exp());
    }
}

/// Text refinement over `active` offsets: sample every masked slot, score
/// all active slots, re-mask the least confident on a linear schedule.
fn text_loop<T: Scalar, R: Rng>(
    params: &ModelParams<T>,
    seq: &mut TokenSequence,
    active: &[usize],
    k_total: usize,
    req: &SampleRequest,
    rng: &mut R,
    trace: &mut DecodeTrace,
) -> Result<()> {
    let layout = seq.layout;
    let n = active.len();
    for &j in active {
        seq.set_text(j, MASK);
    }
    let mut conf = vec![f64::INFINITY; layout.n_text];
    for k in 0..k_total {
        let inf = params.infer(&seq.ids, 1, None)?;
        trace.forwards += 1;
        let before = active.iter().filter(|&&j| seq.ids[layout.text_pos(j)] == MASK).count();
        for &j in active {
            if seq.ids[layout.text_pos(j)] == MASK {
                let (id, _) = sample_range(inf.row(0, layout.text_pos(j)), WORD_RANGE, req.temp_text, rng);
                seq.set_text(j, id);
            }
        }
        text_confidence(&inf, &layout, seq, active, &mut conf);
        let c = decode_mask_count(req.schedules.text, k + 1, k_total, n, n)?;
        let remask = select_lowest(&conf, active, c)?;
        let confidences = active.iter().map(|&j| (j, conf[j])).collect();
        for &j in &remask {
            seq.set_text(j, MASK);
        }
        trace.steps.push(StepTrace {
            k,
            image_masked_before: 0,
            image_masked_after: 0,
            image_frozen: layout.n_image(),
            text_masked_before: before,
            text_masked_after: remask.len(),
            text_len: Some(n),
            confidences,
            tokens: seq.ids.clone(),
        });
    }
    Ok(())
}

/// Regenerates `region` of image `x` given caption ids `y`; everything
/// outside the region is kept as given.
pub fn inpaint<T: Scalar>(
    params: &ModelParams<T>,
    layout: &Layout,
    x: &[TokenId],
    region: &[usize],
    y: &[TokenId],
    req: &SampleRequest,
) -> Result<DecodeOutput> {
    check_params(params, layout, Attention::Bidirectional)?;
    req.validate()?;
    if let Some(&o) = region.iter().find(|&&o| o >= layout.n_image()) {
        return Err(Error::Contract(format!("inpaint offset {o} outside the image")));
    }
    let mut seq = TokenSequence::plain(*layout, x, y)?;
    let mut trace = DecodeTrace::default();
    if !region.is_empty() {
        let mut rng = ChaCha8Rng::seed_from_u64(req.seed);
        image_loop(params, &mut seq, region, req.k_image, req, &mut rng, &mut trace)?;
    }
    Ok(DecodeOutput { seq, trace })
}

/// Text-to-image: the whole grid from a caption (ids padded to `N_T`).
pub fn decode_image<T: Scalar>(params: &ModelParams<T>, layout: &Layout, y: &[TokenId], req: &SampleRequest) -> Result<DecodeOutput> {
    let all: Vec<usize> = (0..layout.n_image()).collect();
    inpaint(params, layout, &blank_image(layout), &all, y, req)
}

/// The central `(G/2)×(G/2)` block of image offsets.
pub fn central_region(grid: usize) -> Vec<usize> {
    let h = grid / 2;
    let s = (grid - h) / 2;
    (s..s + h).flat_map(|r| (s..s + h).map(move |c| r * grid + c)).collect()
}

/// Image-to-text: a length pass, then `k_text` refinements over the
/// predicted length.
pub fn decode_text<T: Scalar>(params: &ModelParams<T>, layout: &Layout, x: &[TokenId], req: &SampleRequest) -> Result<DecodeOutput> {
    decode_text_selected(params, layout, x, NONE, req)
}

/// [`decode_text`] with `selector` in the image selector slot, used to
/// caption one half of a mixed image.
pub fn decode_text_selected<T: Scalar>(
    params: &ModelParams<T>,
    layout: &Layout,
    x: &[TokenId],
    selector: TokenId,
    req: &SampleRequest,
) -> Result<DecodeOutput> {
    check_params(params, layout, Attention::Bidirectional)?;
    req.validate()?;
    let mut seq = TokenSequence::build(*layout, x, &vec![MASK; layout.n_text], selector, NONE)?;
    let mut trace = DecodeTrace::default();
    let inf = params.infer(&seq.ids, 1, Some(layout.bot()))?;
    trace.forwards += 1;
    let n_hat = argmax(inf.length_row(0).unwrap()) + 1;
    trace.predicted_len = Some(n_hat);
    for j in n_hat..layout.n_text {
        seq.set_text(j, PAD);
    }
    let active: Vec<usize> = (0..n_hat).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(req.seed);
    text_loop(params, &mut seq, &active, req.k_text, req, &mut rng, &mut trace)?;
    Ok(DecodeOutput { seq, trace })
}

/// Erased span of a length-`n` caption: `⌈n/2⌉` words starting at
/// `⌊(n − ⌈n/2⌉)/2⌋`.
pub fn infill_span(n: usize) -> std::ops::Range<usize> {
    let m = n.div_ceil(2);
    let s = (n - m) / 2;
    s..s + m
}

/// Regenerates the central half of a known-length caption.
pub fn infill<T: Scalar>(
    params: &ModelParams<T>,
    layout: &Layout,
    x: &[TokenId],
    y: &[TokenId],
    len: usize,
    req: &SampleRequest,
) -> Result<DecodeOutput> {
    check_params(params, layout, Attention::Bidirectional)?;
    req.validate()?;
    if len == 0 || len > layout.n_text {
        return Err(Error::Contract(format!("caption length {len} outside 1..={}", layout.n_text)));
    }
    let mut seq = TokenSequence::plain(*layout, x, y)?;
    let active: Vec<usize> = infill_span(len).collect();
    let mut trace = DecodeTrace {
        predicted_len: Some(len),
        ..Default::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(req.seed);
    text_loop(params, &mut seq, &active, req.k_text, req, &mut rng, &mut trace)?;
    Ok(DecodeOutput { seq, trace })
}

/// Unconditional generation of an (image, caption) pair; the caption
/// length is re-predicted from the length head on every step.
pub fn decode_joint<T: Scalar>(params: &ModelParams<T>, layout: &Layout, req: &SampleRequest) -> Result<DecodeOutput> {
    check_params(params, layout, Attention::Bidirectional)?;
    req.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(req.seed);
    let hi = req.joint_len.1.min(layout.n_text);
    let lo = req.joint_len.0.min(hi);
    let mut cur = rng.gen_range(lo..=hi);
    let mut y = blank_text(layout);
    y[..cur].fill(MASK);
    let mut seq = TokenSequence::plain(*layout, &blank_image(layout), &y)?;
    let mut trace = DecodeTrace::default();
    let k_total = req.k_joint;
    let n_i = layout.n_image();
    let mut img_masked: Vec<usize> = (0..n_i).collect();
    let mut img_conf = vec![f64::INFINITY; n_i];
    let mut sampled = vec![MASK; n_i];
    let mut txt_conf = vec![f64::INFINITY; layout.n_text];
    for k in 0..k_total {
        let inf = params.infer(&seq.ids, 1, Some(layout.bot()))?;
        trace.forwards += 1;
        let n_hat = argmax(inf.length_row(0).unwrap()) + 1;
        for j in cur..n_hat {
            seq.set_text(j, MASK);
        }
        for j in n_hat..cur {
            seq.set_text(j, PAD);
        }
        cur = n_hat;
        // image half
        let noise = req.conf_noise * (1.0 - (k + 1) as f64 / k_total as f64);
        for &o in &img_masked {
            let (id, lp) = sample_range(inf.row(0, layout.image_pos(o)), IMAGE_RANGE, req.temp_image, &mut rng);
            sampled[o] = id;
            img_conf[o] = lp + if noise > 0.0 { noise * gumbel(&mut rng) } else { 0.0 };
        }
        let c = decode_mask_count(req.schedules.image, k + 1, k_total, n_i, img_masked.len())?;
        let keep = select_lowest(&img_conf, &img_masked, c)?;
        let img_before = img_masked.len();
        let mut confidences: Vec<(usize, f64)> = img_masked.iter().map(|&o| (o, img_conf[o])).collect();
        for &o in &img_masked {
            if keep.binary_search(&o).is_err() {
                seq.set_image(o, sampled[o]);
            }
        }
        img_masked = keep;
        // text half
        let active: Vec<usize> = (0..cur).collect();
        let txt_before = active.iter().filter(|&&j| seq.ids[layout.text_pos(j)] == MASK).count();
        for &j in &active {
            if seq.ids[layout.text_pos(j)] == MASK {
                let (id, _) = sample_range(inf.row(0, layout.text_pos(j)), WORD_RANGE, req.temp_text, &mut rng);
                seq.set_text(j, id);
            }
        }
        text_confidence(&inf, layout, &seq, &active, &mut txt_conf);
        let c = decode_mask_count(req.schedules.text, k + 1, k_total, cur, cur)?;
        let remask = select_lowest(&txt_conf, &active, c)?;
        for &j in &remask {
            seq.set_text(j, MASK);
        }
        confidences.extend(active.iter().map(|&j| (n_i + j, txt_conf[j])));
        trace.steps.push(StepTrace {
            k,
            image_masked_before: img_before,
            image_masked_after: img_masked.len(),
            image_frozen: n_i - img_masked.len(),
            text_masked_before: txt_before,
            text_masked_after: remask.len(),
            text_len: Some(cur),
            confidences,
            tokens: seq.ids.clone(),
        });
    }
    trace.predicted_len = Some(cur);
    Ok(DecodeOutput { seq, trace })
}

/// Output of the causal baseline.
#[derive(Clone, Debug, PartialEq)]
pub struct ArOutput {
    /// Generated ids of the target modality (text stops at the end marker).
    pub tokens: Vec<TokenId>,
    pub forwards: usize,
}

/// One token per model call, re-running the whole prefix each time.
///
/// T2I takes caption ids and emits `N_I` image ids; I2T takes image ids and
/// emits words until PAD or `N_T`. Temperature 0 is greedy.
pub fn decode_ar<T: Scalar>(
    params: &ModelParams<T>,
    layout: &Layout,
    condition: &[TokenId],
    direction: Task,
    req: &SampleRequest,
) -> Result<ArOutput> {
    check_params(params, layout, Attention::Causal)?;
    req.validate()?;
    let al = ar_layout(layout, direction)?;
    let mut rng = ChaCha8Rng::seed_from_u64(req.seed);
    let mut out = ArOutput {
        tokens: Vec::new(),
        forwards: 0,
    };
    match direction {
        Task::T2I => {
            let mut seq = TokenSequence::plain(al, &vec![0; al.n_image()], condition)?;
            for i in 0..al.n_image() {
                let p = al.image_pos(i);
                let inf = params.infer(&seq.ids[..p], 1, None)?;
                out.forwards += 1;
                let (id, _) = sample_range(inf.row(0, p - 1), IMAGE_RANGE, req.temp_image, &mut rng);
                seq.set_image(i, id);
                out.tokens.push(id);
            }
        }
        _ => {
            let mut seq = TokenSequence::plain(al, condition, &blank_text(&al))?;
            for j in 0..al.n_text {
                let p = al.text_pos(j);
                let inf = params.infer(&seq.ids[..p], 1, None)?;
                out.forwards += 1;
                let range = if j == 0 { WORD_RANGE } else { WORD_RANGE.with_extra(PAD) };
                let (id, _) = sample_range(inf.row(0, p - 1), range, req.temp_text, &mut rng);
                if id == PAD {
                    break;
                }
                seq.set_text(j, id);
                out.tokens.push(id);
            }
        }
    }
    Ok(out)
}

/// Scores each full sequence at `positions` in one visible pass and
/// returns the best index (first on ties) with all scores.
pub fn rerank<T: Scalar>(params: &ModelParams<T>, candidates: &[Vec<TokenId>], positions: &[usize]) -> Result<(usize, Vec<f64>)> {
    if candidates.is_empty() {
        return Err(Error::Contract("nothing to rerank".into()));
    }
    let scores = candidates
        .iter()
        .map(|c| params.score_sequence(c, positions))
        .collect::<Result<Vec<f64>>>()?;
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate() {
        if s > scores[best] {
            best = i;
        }
    }
    Ok((best, scores))
}

const CANDIDATE_STREAM: u64 = 0x4341_4e44;

fn candidate_request(req: &SampleRequest, s: usize) -> SampleRequest {
    SampleRequest {
        seed: if req.candidates == 1 {
            req.seed
        } else {
            derive_seed(req.seed, CANDIDATE_STREAM, s as u64)
        },
        ..req.clone()
    }
}

/// Draws `req.candidates` images and keeps the one the model scores highest.
pub fn generate_image<T: Scalar>(params: &ModelParams<T>, layout: &Layout, y: &[TokenId], req: &SampleRequest) -> Result<DecodeOutput> {
    let outs = (0..req.candidates)
        .map(|s| decode_image(params, layout, y, &candidate_request(req, s)))
        .collect::<Result<Vec<_>>>()?;
    let positions: Vec<usize> = (0..layout.n_image()).map(|i| layout.image_pos(i)).collect();
    pick(params, outs, &positions)
}

/// Draws `req.candidates` captions and keeps the one the model scores highest.
pub fn generate_text<T: Scalar>(params: &ModelParams<T>, layout: &Layout, x: &[TokenId], req: &SampleRequest) -> Result<DecodeOutput> {
    let outs = (0..req.candidates)
        .map(|s| decode_text(params, layout, x, &candidate_request(req, s)))
        .collect::<Result<Vec<_>>>()?;
    if outs.len() == 1 {
        return Ok(outs.into_iter().next().unwrap());
    }
    let seqs: Vec<Vec<TokenId>> = outs.iter().map(|o| o.seq.ids.clone()).collect();
    let scores = outs
        .iter()
        .zip(&seqs)
        .map(|(o, s)| {
            let n = o.trace.predicted_len.unwrap_or(0);
            let pos: Vec<usize> = (0..n).map(|j| layout.text_pos(j)).collect();
            // mean per word so short captions are not favored
            params.score_sequence(s, &pos).map(|v| v / n.max(1) as f64)
        })
        .collect::<Result<Vec<f64>>>()?;
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate() {
        if s > scores[best] {
            best = i;
        }
    }
    Ok(outs.into_iter().nth(best).unwrap())
}

fn pick<T: Scalar>(params: &ModelParams<T>, outs: Vec<DecodeOutput>, positions: &[usize]) -> Result<DecodeOutput> {
    if outs.len() == 1 {
        return Ok(outs.into_iter().next().unwrap());
    }
    let seqs: Vec<Vec<TokenId>> = outs.iter().map(|o| o.seq.ids.clone()).collect();
    let (best, _) = rerank(params, &seqs, positions)?;
    Ok(outs.into_iter().nth(best).unwrap())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn infill_span_rule() {
        assert_eq!(infill_span(4), 1..3);
        assert_eq!(infill_span(5), 1..4);
        assert_eq!(infill_span(1), 0..1);
        assert_eq!(infill_span(7), 1..5);
        assert_eq!(infill_span(2), 0..1);
    }

    #[test]
    fn central_block() {
        assert_eq!(central_region(4), vec![5, 6, 9, 10]);
        assert_eq!(central_region(8).len(), 16);
        assert_eq!(central_region(8)[0], 2 * 8 + 2);
    }
}
