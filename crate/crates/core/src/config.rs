//! Flat `key = value` run configuration.
//!
//! Lines starting with `#` and blank lines are ignored. Every key must be
//! known; a key may appear once per file. The canonical text (all keys,
//! fixed order) is hashed and embedded in every artifact.

use sha2::{Digest, Sha256};

use magvlt_ndnum::AdamWConfig;

use crate::decode::SampleRequest;
use crate::error::{Error, Result};
use crate::mask::{Schedule, Schedules};
use crate::model::{Attention, ModelConfig};
use crate::train::{Lambdas, Objective, TaskWeights, TrainConfig};
use crate::vocab::{Layout, VOCAB_SIZE};

pub const SEED_ENV: &str = "MAGVLT_SEED";

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub grid: usize,
    pub max_text: usize,
    pub n_train: usize,
    pub n_val: usize,
    pub layers: usize,
    pub dim: usize,
    pub heads: usize,
    pub ffn_mult: usize,
    pub tie_embeddings: bool,
    pub objective: Objective,
    pub task_weights: (f64, f64, f64),
    pub lambda_tl: f64,
    pub lambda_um: f64,
    pub lambda_ms: f64,
    pub schedule_image: Schedule,
    pub schedule_text: Schedule,
    pub batch: usize,
    pub steps: u64,
    pub lr: f64,
    pub warmup_frac: f64,
    pub lr_floor: f64,
    pub clip: f64,
    pub smoothing: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub ar_gen_weight: f64,
    pub ar_cond_weight: f64,
    pub k_image: usize,
    pub k_text: usize,
    pub k_joint: usize,
    pub temp_image: f64,
    pub temp_text: f64,
    pub conf_noise: f64,
    pub candidates: usize,
    pub joint_len_min: usize,
    pub joint_len_max: usize,
    pub checkpoint_every: u64,
    pub eval_samples: usize,
    pub eval_joint: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::toy()
    }
}

fn objective_name(o: Objective) -> &'static str {
    match o {
        Objective::Masked => "masked",
        Objective::Autoregressive => "ar",
    }
}

impl RunConfig {
    /// Desk-scale defaults: L=4, D=128, H=4 on an 8×8 grid.
    pub fn toy() -> Self {
        Self {
            seed: 0,
            grid: 8,
            max_text: 12,
            n_train: 20_000,
            n_val: 500,
            layers: 4,
            dim: 128,
            heads: 4,
            ffn_mult: 4,
            tie_embeddings: true,
            objective: Objective::Masked,
            task_weights: (8.0, 1.0, 1.0),
            lambda_tl: 0.01,
            lambda_um: 1.0,
            lambda_ms: 0.5,
            schedule_image: Schedule::Cosine,
            schedule_text: Schedule::Linear,
            batch: 64,
            steps: 20_000,
            lr: 3e-4,
            warmup_frac: 0.02,
            lr_floor: 0.0,
            clip: 4.0,
            smoothing: 0.1,
            beta1: 0.9,
            beta2: 0.96,
            eps: 1e-8,
            weight_decay: 4.5e-2,
            ar_gen_weight: 0.9,
            ar_cond_weight: 0.1,
            k_image: 10,
            k_text: 12,
            k_joint: 12,
            temp_image: 1.0,
            temp_text: 0.7,
            conf_noise: 2.0,
            candidates: 1,
            joint_len_min: 2,
            joint_len_max: 12,
            checkpoint_every: 1000,
            eval_samples: 200,
            eval_joint: 100,
        }
    }

    /// The toy preset is also the reference configuration of the learning checks.
    pub fn reference() -> Self {
        Self::toy()
    }

    /// Optimizer and data-shape settings as published: 16×16 grid, 64 text
    /// slots, batch 4096, 40k updates, lr 4.5e-4, 64 reranked candidates.
    pub fn paper() -> Self {
        Self {
            grid: 16,
            max_text: 64,
            joint_len_min: 8,
            joint_len_max: 16,
            batch: 4096,
            steps: 40_000,
            lr: 4.5e-4,
            candidates: 64,
            ..Self::toy()
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "toy" => Ok(Self::toy()),
            "reference" => Ok(Self::reference()),
            "paper" => Ok(Self::paper()),
            _ => Err(Error::config("preset", format!("unknown preset `{name}` (toy, reference, paper)"))),
        }
    }

    /// `(key, value)` pairs in canonical order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let (a, b, c) = self.task_weights;
        vec![
            ("seed", self.seed.to_string()),
            ("grid", self.grid.to_string()),
            ("max_text", self.max_text.to_string()),
            ("n_train", self.n_train.to_string()),
            ("n_val", self.n_val.to_string()),
            ("layers", self.layers.to_string()),
            ("dim", self.dim.to_string()),
            ("heads", self.heads.to_string()),
            ("ffn_mult", self.ffn_mult.to_string()),
            ("tie_embeddings", self.tie_embeddings.to_string()),
            ("objective", objective_name(self.objective).to_string()),
            ("task_weights", format!("{a}:{b}:{c}")),
            ("lambda_tl", self.lambda_tl.to_string()),
            ("lambda_um", self.lambda_um.to_string()),
            ("lambda_ms", self.lambda_ms.to_string()),
            ("schedule_image", self.schedule_image.name().to_string()),
            ("schedule_text", self.schedule_text.name().to_string()),
            ("batch", self.batch.to_string()),
            ("steps", self.steps.to_string()),
            ("lr", self.lr.to_string()),
            ("warmup_frac", self.warmup_frac.to_string()),
            ("lr_floor", self.lr_floor.to_string()),
            ("clip", self.clip.to_string()),
            ("smoothing", self.smoothing.to_string()),
            ("beta1", self.beta1.to_string()),
            ("beta2", self.beta2.to_string()),
            ("eps", self.eps.to_string()),
            ("weight_decay", self.weight_decay.to_string()),
            ("ar_gen_weight", self.ar_gen_weight.to_string()),
            ("ar_cond_weight", self.ar_cond_weight.to_string()),
            ("k_image", self.k_image.to_string()),
            ("k_text", self.k_text.to_string()),
            ("k_joint", self.k_joint.to_string()),
            ("temp_image", self.temp_image.to_string()),
            ("temp_text", self.temp_text.to_string()),
            ("conf_noise", self.conf_noise.to_string()),
            ("candidates", self.candidates.to_string()),
            ("joint_len_min", self.joint_len_min.to_string()),
            ("joint_len_max", self.joint_len_max.to_string()),
            ("checkpoint_every", self.checkpoint_every.to_string()),
            ("eval_samples", self.eval_samples.to_string()),
            ("eval_joint", self.eval_joint.to_string()),
        ]
    }

    pub fn keys() -> Vec<&'static str> {
        Self::toy().entries().into_iter().map(|e| e.0).collect()
    }

    /// Assigns one key from its text form.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
            v.parse().map_err(|_| Error::config(key, format!("`{v}` is not a valid number")))
        }
        fn real(key: &str, v: &str) -> Result<f64> {
            let x: f64 = num(key, v)?;
            if !x.is_finite() {
                return Err(Error::config(key, "must be finite"));
            }
            Ok(x)
        }
        let sched = |v: &str| Schedule::parse(v).ok_or_else(|| Error::config(key, format!("`{v}` is not cosine or linear")));
        match key {
            "seed" => self.seed = num(key, v)?,
            "grid" => self.grid = num(key, v)?,
            "max_text" => self.max_text = num(key, v)?,
            "n_train" => self.n_train = num(key, v)?,
            "n_val" => self.n_val = num(key, v)?,
            "layers" => self.layers = num(key, v)?,
            "dim" => self.dim = num(key, v)?,
            "heads" => self.heads = num(key, v)?,
            "ffn_mult" => self.ffn_mult = num(key, v)?,
            "tie_embeddings" => {
                self.tie_embeddings = v.parse().map_err(|_| Error::config(key, format!("`{v}` is not true or false")))?
            }
            "objective" => {
                self.objective = match v {
                    "masked" => Objective::Masked,
                    "ar" => Objective::Autoregressive,
                    _ => return Err(Error::config(key, format!("`{v}` is not masked or ar"))),
                }
            }
            "task_weights" => {
                TaskWeights::parse(v)?;
                let raw: Vec<f64> = v.split(':').map(|p| p.trim().parse().unwrap()).collect();
                self.task_weights = (raw[0], raw[1], raw[2]);
            }
            "lambda_tl" => self.lambda_tl = real(key, v)?,
            "lambda_um" => self.lambda_um = real(key, v)?,
            "lambda_ms" => self.lambda_ms = real(key, v)?,
            "schedule_image" => self.schedule_image = sched(v)?,
            "schedule_text" => self.schedule_text = sched(v)?,
            "batch" => self.batch = num(key, v)?,
            "steps" => self.steps = num(key, v)?,
            "lr" => self.lr = real(key, v)?,
            "warmup_frac" => self.warmup_frac = real(key, v)?,
            "lr_floor" => self.lr_floor = real(key, v)?,
            "clip" => self.clip = real(key, v)?,
            "smoothing" => self.smoothing = real(key, v)?,
            "beta1" => self.beta1 = real(key, v)?,
            "beta2" => self.beta2 = real(key, v)?,
            "eps" => self.eps = real(key, v)?,
            "weight_decay" => self.weight_decay = real(key, v)?,
            "ar_gen_weight" => self.ar_gen_weight = real(key, v)?,
            "ar_cond_weight" => self.ar_cond_weight = real(key, v)?,
            "k_image" => self.k_image = num(key, v)?,
            "k_text" => self.k_text = num(key, v)?,
            "k_joint" => self.k_joint = num(key, v)?,
            "temp_image" => self.temp_image = real(key, v)?,
            "temp_text" => self.temp_text = real(key, v)?,
            "conf_noise" => self.conf_noise = real(key, v)?,
            "candidates" => self.candidates = num(key, v)?,
            "joint_len_min" => self.joint_len_min = num(key, v)?,
            "joint_len_max" => self.joint_len_max = num(key, v)?,
            "checkpoint_every" => self.checkpoint_every = num(key, v)?,
            "eval_samples" => self.eval_samples = num(key, v)?,
            "eval_joint" => self.eval_joint = num(key, v)?,
            _ => return Err(Error::config(key, "unknown key")),
        }
        Ok(())
    }

    /// Applies a config file's assignments on top of `self`.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        let mut seen = std::collections::HashSet::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Parse(format!("line {}: expected `key = value`", n + 1)))?;
            let k = k.trim();
            if !seen.insert(k.to_string()) {
                return Err(Error::config(k, format!("assigned twice (line {})", n + 1)));
            }
            self.set(k, v)?;
        }
        Ok(())
    }

    /// Parses a file over the toy defaults, or over `preset = name` when the
    /// first assignment names one.
    pub fn parse(text: &str) -> Result<Self> {
        let mut base = Self::toy();
        let mut rest = String::new();
        for line in text.lines() {
            let t = line.trim();
            if let Some(v) = t.strip_prefix("preset").and_then(|r| r.trim_start().strip_prefix('=')) {
                base = Self::preset(v.trim())?;
            } else {
                rest.push_str(line);
                rest.push('\n');
            }
        }
        base.apply_text(&rest)?;
        Ok(base)
    }

    /// Overrides the seed from `MAGVLT_SEED` when set.
    pub fn apply_env(&mut self) -> Result<()> {
        if let Ok(v) = std::env::var(SEED_ENV) {
            self.seed = v
                .trim()
                .parse()
                .map_err(|_| Error::config("seed", format!("{SEED_ENV}=`{v}` is not an integer")))?;
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        self.entries().into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    /// sha256 of the canonical text, first 16 bytes in hex.
    pub fn hash(&self) -> String {
        hex::encode(&Sha256::digest(self.to_text().as_bytes())[..16])
    }

    pub fn layout(&self) -> Layout {
        Layout::new(self.grid, self.max_text)
    }

    pub fn model(&self) -> ModelConfig {
        ModelConfig {
            layers: self.layers,
            dim: self.dim,
            heads: self.heads,
            seq_len: self.layout().seq_len(),
            vocab_size: VOCAB_SIZE,
            max_text: self.max_text,
            attention: match self.objective {
                Objective::Masked => Attention::Bidirectional,
                Objective::Autoregressive => Attention::Causal,
            },
            tie_embeddings: self.tie_embeddings,
            ffn_mult: self.ffn_mult,
        }
    }

    pub fn schedules(&self) -> Schedules {
        Schedules {
            image: self.schedule_image,
            text: self.schedule_text,
        }
    }

    pub fn train(&self) -> Result<TrainConfig> {
        let (a, b, c) = self.task_weights;
        let cfg = TrainConfig {
            model: self.model(),
            layout: self.layout(),
            objective: self.objective,
            tasks: TaskWeights::new(a, b, c)?,
            lambdas: Lambdas {
                tl: self.lambda_tl,
                um: self.lambda_um,
                ms: self.lambda_ms,
            },
            schedules: self.schedules(),
            batch: self.batch,
            steps: self.steps,
            base_lr: self.lr,
            warmup_frac: self.warmup_frac,
            lr_floor: self.lr_floor,
            clip: self.clip,
            smoothing: self.smoothing,
            adamw: AdamWConfig {
                beta1: self.beta1,
                beta2: self.beta2,
                eps: self.eps,
                weight_decay: self.weight_decay,
            },
            seed: self.seed,
            ar_gen_weight: self.ar_gen_weight,
            ar_cond_weight: self.ar_cond_weight,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn request(&self) -> Result<SampleRequest> {
        let r = SampleRequest {
            k_image: self.k_image,
            k_text: self.k_text,
            k_joint: self.k_joint,
            temp_image: self.temp_image,
            temp_text: self.temp_text,
            conf_noise: self.conf_noise,
            candidates: self.candidates,
            joint_len: (self.joint_len_min, self.joint_len_max),
            schedules: self.schedules(),
            seed: self.seed,
        };
        r.validate()?;
        Ok(r)
    }

    /// Checks every derived structure.
    pub fn validate(&self) -> Result<()> {
        if self.grid == 0 || self.grid % 2 != 0 {
            return Err(Error::config("grid", "must be a positive even number"));
        }
        if self.max_text < 7 {
            return Err(Error::config("max_text", "the grammar needs at least 7 text slots"));
        }
        self.train()?;
        self.request()?;
        Ok(())
    }
}
