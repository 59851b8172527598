//! Shared pre-LayerNorm transformer over the concatenated token sequence,
//! with a token head over the whole vocabulary and a text-length head read
//! at the `<BOT>` position.
//!
//! Parameter order (also the checkpoint payload order):
//!
//! ```text
//! tok_emb [V, D]
//! pos_emb [S, D]
//! for each layer l:
//!   l.ln1.gain [D], l.ln1.bias [D]
//!   l.attn.qkv.weight [D, 3D], l.attn.qkv.bias [3D]
//!   l.attn.out.weight [D, D], l.attn.out.bias [D]
//!   l.ln2.gain [D], l.ln2.bias [D]
//!   l.mlp.fc1.weight [D, F·D], l.mlp.fc1.bias [F·D]
//!   l.mlp.fc2.weight [F·D, D], l.mlp.fc2.bias [D]
//! lnf.gain [D], lnf.bias [D]
//! head.weight [V, D]            (only when embeddings are untied)
//! head.bias [V]
//! length.weight [D, N_T], length.bias [N_T]
//! ```

use magvlt_ndnum::{log_softmax, Scalar, Tape, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::vocab::TokenId;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Attention {
    Bidirectional,
    Causal,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub layers: usize,
    pub dim: usize,
    pub heads: usize,
    pub seq_len: usize,
    pub vocab_size: usize,
    pub max_text: usize,
    pub attention: Attention,
    pub tie_embeddings: bool,
    pub ffn_mult: usize,
}

const MAX_EXTENT: usize = 1 << 16;

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("layers", self.layers),
            ("dim", self.dim),
            ("heads", self.heads),
            ("seq_len", self.seq_len),
            ("vocab_size", self.vocab_size),
            ("max_text", self.max_text),
            ("ffn_mult", self.ffn_mult),
        ];
        for (k, v) in dims {
            if v == 0 || v > MAX_EXTENT {
                return Err(Error::config(k, format!("{v} outside 1..={MAX_EXTENT}")));
            }
        }
        if self.dim % self.heads != 0 {
            return Err(Error::config(
                "heads",
                format!("dim {} not divisible by {} heads", self.dim, self.heads),
            ));
        }
        if self.max_text >= self.seq_len {
            return Err(Error::config("max_text", "must be shorter than the sequence"));
        }
        let total = self
            .param_specs()
            .iter()
            .try_fold(0usize, |acc, (_, s)| {
                s.iter()
                    .try_fold(1usize, |p, &d| p.checked_mul(d))
                    .and_then(|n| acc.checked_add(n))
            })
            .ok_or_else(|| Error::config("dim", "parameter count overflows"))?;
        if total > 1 << 31 {
            return Err(Error::config("dim", format!("{total} parameters is too many")));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    fn per_layer() -> usize {
        12
    }

    /// Names and shapes of every parameter, in storage order.
    pub fn param_specs(&self) -> Vec<(String, Vec<usize>)> {
        let (v, d, s, f) = (self.vocab_size, self.dim, self.seq_len, self.ffn_mult * self.dim);
        let mut out = vec![
            ("tok_emb".to_string(), vec![v, d]),
            ("pos_emb".to_string(), vec![s, d]),
        ];
        for l in 0..self.layers {
            let p = |n: &str| format!("{l}.{n}");
            out.push((p("ln1.gain"), vec![d]));
            out.push((p("ln1.bias"), vec![d]));
            out.push((p("attn.qkv.weight"), vec![d, 3 * d]));
            out.push((p("attn.qkv.bias"), vec![3 * d]));
            out.push((p("attn.out.weight"), vec![d, d]));
            out.push((p("attn.out.bias"), vec![d]));
            out.push((p("ln2.gain"), vec![d]));
            out.push((p("ln2.bias"), vec![d]));
            out.push((p("mlp.fc1.weight"), vec![d, f]));
            out.push((p("mlp.fc1.bias"), vec![f]));
            out.push((p("mlp.fc2.weight"), vec![f, d]));
            out.push((p("mlp.fc2.bias"), vec![d]));
        }
        out.push(("lnf.gain".to_string(), vec![d]));
        out.push(("lnf.bias".to_string(), vec![d]));
        if !self.tie_embeddings {
            out.push(("head.weight".to_string(), vec![v, d]));
        }
        out.push(("head.bias".to_string(), vec![v]));
        out.push(("length.weight".to_string(), vec![d, self.max_text]));
        out.push(("length.bias".to_string(), vec![self.max_text]));
        out
    }

    /// Closed-form parameter count.
    pub fn param_count(&self) -> usize {
        let (v, d, s, nt) = (self.vocab_size, self.dim, self.seq_len, self.max_text);
        let f = self.ffn_mult * d;
        let layer = 2 * d + (3 * d * d + 3 * d) + (d * d + d) + 2 * d + (d * f + f) + (f * d + d);
        let head = if self.tie_embeddings { v } else { v * d + v };
        v * d + s * d + self.layers * layer + 2 * d + head + d * nt + nt
    }
}

/// Offsets of the parameter slots inside [`ModelParams::tensors`].
#[derive(Clone, Copy, Debug)]
struct Slots {
    layers: usize,
    tie: bool,
}

impl Slots {
    const TOK: usize = 0;
    const POS: usize = 1;

    fn layer(&self, l: usize, k: usize) -> usize {
        2 + l * ModelConfig::per_layer() + k
    }

    fn lnf(&self) -> usize {
        2 + self.layers * ModelConfig::per_layer()
    }

    fn head_weight(&self) -> Option<usize> {
        (!self.tie).then(|| self.lnf() + 2)
    }

    fn head_bias(&self) -> usize {
        self.lnf() + if self.tie { 2 } else { 3 }
    }

    fn length(&self) -> usize {
        self.head_bias() + 1
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<T> {
    pub config: ModelConfig,
    pub tensors: Vec<Tensor<T>>,
}

pub const INIT_STD: f64 = 0.02;

impl<T: Scalar> ModelParams<T> {
    /// Normal(0, 0.02) weights; the two residual projections per layer use
    /// std 0.02/√(2L); biases zero and LayerNorm gains one.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let base = Normal::new(0.0, INIT_STD).unwrap();
        let resid = Normal::new(0.0, INIT_STD / (2.0 * config.layers as f64).sqrt()).unwrap();
        let tensors = config
            .param_specs()
            .into_iter()
            .map(|(name, shape)| {
                let n: usize = shape.iter().product();
                let data: Vec<T> = if name.ends_with(".gain") {
                    vec![T::one(); n]
                } else if shape.len() == 1 {
                    vec![T::zero(); n]
                } else if name.ends_with("attn.out.weight") || name.ends_with("mlp.fc2.weight") {
                    (0..n).map(|_| T::from_f64_lossy(resid.sample(&mut rng))).collect()
                } else {
                    (0..n).map(|_| T::from_f64_lossy(base.sample(&mut rng))).collect()
                };
                Tensor::new(shape, data).unwrap()
            })
            .collect();
        Ok(Self { config, tensors })
    }

    pub fn param_count(&self) -> usize {
        self.tensors.iter().map(|t| t.len()).sum()
    }

    /// Weight decay applies to matrices only.
    pub fn decay_mask(&self) -> Vec<bool> {
        self.tensors.iter().map(|t| t.shape().len() == 2).collect()
    }

    pub fn cast<U: Scalar>(&self) -> ModelParams<U> {
        ModelParams {
            config: self.config,
            tensors: self.tensors.iter().map(|t| t.cast()).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(|t| t.is_finite())
    }

    /// Puts every parameter on the tape, as gradient leaves or constants.
    pub fn register(&self, tape: &mut Tape<T>, trainable: bool) -> Vec<Var> {
        self.tensors
            .iter()
            .map(|t| {
                if trainable {
                    tape.param(t.clone())
                } else {
                    tape.constant(t.clone())
                }
            })
            .collect()
    }
}

/// Outputs of one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct ForwardOut {
    /// `[B, S', V]`
    pub logits: Var,
    /// `[B, N_T]`, present when a length position was requested.
    pub length_logits: Option<Var>,
}

/// Forward pass over `batch` sequences of equal length `ids.len() / batch`.
///
/// Sequences may be shorter than `config.seq_len` (causal prefix decoding);
/// positions index the shared position table from 0.
pub fn forward<T: Scalar>(
    tape: &mut Tape<T>,
    vars: &[Var],
    config: &ModelConfig,
    ids: &[TokenId],
    batch: usize,
    length_pos: Option<usize>,
) -> Result<ForwardOut> {
    if batch == 0 || ids.len() % batch != 0 {
        return Err(Error::Contract(format!("{} ids do not split into {batch} sequences", ids.len())));
    }
    let s = ids.len() / batch;
    if s == 0 || s > config.seq_len {
        return Err(Error::Contract(format!(
            "sequence length {s} outside 1..={}",
            config.seq_len
        )));
    }
    if let Some(p) = length_pos {
        if p >= s {
            return Err(Error::Contract(format!("length position {p} beyond sequence {s}")));
        }
    }
    let slots = Slots {
        layers: config.layers,
        tie: config.tie_embeddings,
    };
    let (d, h, dh) = (config.dim, config.heads, config.head_dim());
    let tok = tape.embedding(vars[Slots::TOK], ids, &[batch, s])?;
    let pos_ids: Vec<usize> = (0..batch).flat_map(|_| 0..s).collect();
    let pos = tape.embedding(vars[Slots::POS], &pos_ids, &[batch, s])?;
    let mut x = tape.add(tok, pos)?;
    let scale = T::from_f64_lossy(1.0 / (dh as f64).sqrt());
    for l in 0..config.layers {
        let w = |k: usize| vars[slots.layer(l, k)];
        let a = tape.layernorm(x, w(0), w(1))?;
        let qkv = tape.matmul(a, w(2), false)?;
        let qkv = tape.add_row(qkv, w(3))?;
        let split = |tape: &mut Tape<T>, i: usize| -> Result<Var> {
            let part = tape.slice_last(qkv, i * d, (i + 1) * d)?;
            let part = tape.reshape(part, &[batch, s, h, dh])?;
            let part = tape.transpose12(part)?;
            Ok(tape.reshape(part, &[batch * h, s, dh])?)
        };
        let q = split(tape, 0)?;
        let k = split(tape, 1)?;
        let v = split(tape, 2)?;
        let scores = tape.bmm(q, k, true)?;
        let mut scores = tape.scale(scores, scale)?;
        if config.attention == Attention::Causal {
            scores = tape.causal_mask(scores)?;
        }
        let att = tape.softmax(scores)?;
        let o = tape.bmm(att, v, false)?;
        let o = tape.reshape(o, &[batch, h, s, dh])?;
        let o = tape.transpose12(o)?;
        let o = tape.reshape(o, &[batch, s, d])?;
        let o = tape.matmul(o, w(4), false)?;
        let o = tape.add_row(o, w(5))?;
        x = tape.add(x, o)?;
        let m = tape.layernorm(x, w(6), w(7))?;
        let m = tape.matmul(m, w(8), false)?;
        let m = tape.add_row(m, w(9))?;
        let m = tape.gelu(m)?;
        let m = tape.matmul(m, w(10), false)?;
        let m = tape.add_row(m, w(11))?;
        x = tape.add(x, m)?;
    }
    let lnf = slots.lnf();
    let hf = tape.layernorm(x, vars[lnf], vars[lnf + 1])?;
    let head = slots.head_weight().unwrap_or(Slots::TOK);
    let logits = tape.matmul(hf, vars[head], true)?;
    let logits = tape.add_row(logits, vars[slots.head_bias()])?;
    let length_logits = match length_pos {
        Some(p) => {
            let rows: Vec<usize> = (0..batch).map(|b| b * s + p).collect();
            let at = tape.gather_rows(hf, &rows)?;
            let ll = tape.matmul(at, vars[slots.length()], false)?;
            Some(tape.add_row(ll, vars[slots.length() + 1])?)
        }
        None => None,
    };
    Ok(ForwardOut {
        logits,
        length_logits,
    })
}

/// Plain (no gradient) logits for a batch: `([B·S, V] row-major, [B, N_T])`.
pub struct Inference<T> {
    pub logits: Tensor<T>,
    pub length_logits: Option<Tensor<T>>,
    pub seq_len: usize,
}

impl<T: Scalar> Inference<T> {
    pub fn row(&self, b: usize, pos: usize) -> &[T] {
        self.logits.row(b * self.seq_len + pos)
    }

    pub fn length_row(&self, b: usize) -> Option<&[T]> {
        self.length_logits.as_ref().map(|t| t.row(b))
    }
}

impl<T: Scalar> ModelParams<T> {
    pub fn infer(&self, ids: &[TokenId], batch: usize, length_pos: Option<usize>) -> Result<Inference<T>> {
        let mut tape = Tape::new();
        let vars = self.register(&mut tape, false);
        let out = forward(&mut tape, &vars, &self.config, ids, batch, length_pos)?;
        let seq_len = ids.len() / batch;
        let logits = tape.value(out.logits).clone();
        let length_logits = out.length_logits.map(|v| tape.value(v).clone());
        Ok(Inference {
            logits,
            length_logits,
            seq_len,
        })
    }

    /// Sum of `log p(ids[p])` over `positions`, from one fully visible pass.
    pub fn score_sequence(&self, ids: &[TokenId], positions: &[usize]) -> Result<f64> {
        if positions.is_empty() {
            return Ok(0.0);
        }
        if let Some(&p) = positions.iter().find(|&&p| p >= ids.len()) {
            return Err(Error::Contract(format!("score position {p} beyond sequence {}", ids.len())));
        }
        let inf = self.infer(ids, 1, None)?;
        Ok(positions
            .iter()
            .map(|&p| log_softmax(inf.row(0, p))[ids[p]].to_f64().unwrap())
            .sum())
    }
}

// ---- checkpoint format -----------------------------------------------------

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"MAGVLTCK";
pub const OPTIMIZER_MAGIC: &[u8; 8] = b"MAGVLTOP";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointHeader {
    pub model: ModelConfig,
    pub params: Vec<ParamEntry>,
    /// Resolved run configuration text, for provenance.
    #[serde(default)]
    pub run_config: String,
    #[serde(default)]
    pub config_hash: String,
    #[serde(default)]
    pub step: u64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

fn write_container(magic: &[u8; 8], header: &str, payload: &[&Tensor<f32>]) -> Vec<u8> {
    let n: usize = payload.iter().map(|t| t.len()).sum();
    let mut out = Vec::with_capacity(16 + header.len() + 4 * n);
    out.extend_from_slice(magic);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(header.as_bytes());
    for t in payload {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

fn read_container<'a>(magic: &[u8; 8], bytes: &'a [u8]) -> Result<(&'a str, &'a [u8])> {
    if bytes.len() < 16 || &bytes[..8] != magic {
        return Err(Error::Format("bad magic".into()));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(Error::Format(format!("unsupported version {version}")));
    }
    let hlen = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
    let rest = &bytes[16..];
    if hlen > rest.len() {
        return Err(Error::Format("header length exceeds file".into()));
    }
    let header = std::str::from_utf8(&rest[..hlen])
        .map_err(|_| Error::Format("header is not UTF-8".into()))?;
    Ok((header, &rest[hlen..]))
}

fn read_tensors(payload: &[u8], shapes: &[Vec<usize>]) -> Result<Vec<Tensor<f32>>> {
    let total: usize = shapes.iter().map(|s| s.iter().product::<usize>()).sum();
    if payload.len() != total * 4 {
        return Err(Error::Format(format!(
            "payload has {} bytes, expected {}",
            payload.len(),
            total * 4
        )));
    }
    let mut off = 0;
    let mut out = Vec::with_capacity(shapes.len());
    for s in shapes {
        let n: usize = s.iter().product();
        let data = payload[off..off + 4 * n]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        off += 4 * n;
        out.push(Tensor::new(s.clone(), data)?);
    }
    Ok(out)
}

/// Serializes parameters: magic, version, header length, JSON header, then
/// little-endian f32 values in parameter order.
pub fn encode_checkpoint(params: &ModelParams<f32>, run_config: &str, config_hash: &str, step: u64) -> Vec<u8> {
    let header = CheckpointHeader {
        model: params.config,
        params: params
            .config
            .param_specs()
            .into_iter()
            .map(|(name, shape)| ParamEntry { name, shape })
            .collect(),
        run_config: run_config.to_string(),
        config_hash: config_hash.to_string(),
        step,
    };
    let h = serde_json::to_string(&header).expect("header serializes");
    let refs: Vec<&Tensor<f32>> = params.tensors.iter().collect();
    write_container(CHECKPOINT_MAGIC, &h, &refs)
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<(ModelParams<f32>, CheckpointHeader)> {
    let (h, payload) = read_container(CHECKPOINT_MAGIC, bytes)?;
    let header: CheckpointHeader = serde_json::from_str(h)?;
    header.model.validate()?;
    let expect: Vec<ParamEntry> = header
        .model
        .param_specs()
        .into_iter()
        .map(|(name, shape)| ParamEntry { name, shape })
        .collect();
    if expect != header.params {
        return Err(Error::Format("parameter listing does not match the model config".into()));
    }
    let shapes: Vec<Vec<usize>> = expect.into_iter().map(|e| e.shape).collect();
    let tensors = read_tensors(payload, &shapes)?;
    Ok((
        ModelParams {
            config: header.model,
            tensors,
        },
        header,
    ))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct OptimizerHeader {
    step: u64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    weight_decay: f64,
    shapes: Vec<Vec<usize>>,
}

/// Same container as checkpoints: first moments then second moments.
pub fn encode_optimizer(opt: &magvlt_ndnum::AdamW<f32>) -> Vec<u8> {
    let header = OptimizerHeader {
        step: opt.step,
        beta1: opt.config.beta1,
        beta2: opt.config.beta2,
        eps: opt.config.eps,
        weight_decay: opt.config.weight_decay,
        shapes: opt.m.iter().map(|t| t.shape().to_vec()).collect(),
    };
    let h = serde_json::to_string(&header).expect("header serializes");
    let refs: Vec<&Tensor<f32>> = opt.m.iter().chain(opt.v.iter()).collect();
    write_container(OPTIMIZER_MAGIC, &h, &refs)
}

pub fn decode_optimizer(bytes: &[u8]) -> Result<magvlt_ndnum::AdamW<f32>> {
    let (h, payload) = read_container(OPTIMIZER_MAGIC, bytes)?;
    let header: OptimizerHeader = serde_json::from_str(h)?;
    let mut total = 0usize;
    for s in &header.shapes {
        let n = s
            .iter()
            .try_fold(1usize, |p, &d| p.checked_mul(d))
            .ok_or_else(|| Error::Format("shape overflows".into()))?;
        total = total
            .checked_add(n)
            .ok_or_else(|| Error::Format("shape overflows".into()))?;
    }
    if total.checked_mul(8) != Some(payload.len()) {
        return Err(Error::Format("optimizer payload size mismatch".into()));
    }
    let mut shapes = header.shapes.clone();
    shapes.extend(header.shapes.iter().cloned());
    let mut tensors = read_tensors(payload, &shapes)?;
    let v = tensors.split_off(header.shapes.len());
    Ok(magvlt_ndnum::AdamW {
        config: magvlt_ndnum::AdamWConfig {
            beta1: header.beta1,
            beta2: header.beta2,
            eps: header.eps,
            weight_decay: header.weight_decay,
        },
        step: header.step,
        m: tensors,
        v,
    })
}
