//! Mask-ratio schedules, training-mask sampling, decode-step mask selection
//! and the unrolled re-masking rule.

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Schedule {
    /// `γ(r) = cos(πr/2)`
    Cosine,
    /// `γ(r) = 1 − r`
    Linear,
}

impl Schedule {
    pub fn gamma(self, r: f64) -> Result<f64> {
        if !(0.0..=1.0).contains(&r) {
            return Err(Error::Contract(format!("mask ratio step {r} outside [0, 1]")));
        }
        if r == 1.0 {
            return Ok(0.0);
        }
        Ok(match self {
            Schedule::Cosine => (std::f64::consts::FRAC_PI_2 * r).cos(),
            Schedule::Linear => 1.0 - r,
        })
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "cosine" => Some(Schedule::Cosine),
            "linear" => Some(Schedule::Linear),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Schedule::Cosine => "cosine",
            Schedule::Linear => "linear",
        }
    }
}

/// Tolerance absorbing float error in `γ·N` before taking the ceiling.
const CEIL_SLACK: f64 = 1e-9;

/// `⌈γ·n⌉`, clamped to `[0, n]`.
pub fn mask_count(gamma: f64, n: usize) -> usize {
    let c = (gamma * n as f64 - CEIL_SLACK).ceil();
    (c.max(0.0) as usize).min(n)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Task {
    T2I,
    I2T,
    IT2IT,
}

impl Task {
    pub const ALL: [Task; 3] = [Task::T2I, Task::I2T, Task::IT2IT];

    pub fn name(self) -> &'static str {
        match self {
            Task::T2I => "t2i",
            Task::I2T => "i2t",
            Task::IT2IT => "it2it",
        }
    }

    pub fn masks_image(self) -> bool {
        matches!(self, Task::T2I | Task::IT2IT)
    }

    pub fn masks_text(self) -> bool {
        matches!(self, Task::I2T | Task::IT2IT)
    }
}

/// Masked positions for one sample, as offsets within each modality block.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct MaskPlan {
    pub r_image: Option<f64>,
    pub r_text: Option<f64>,
    /// Sorted, duplicate-free offsets in `[0, N_I)`.
    pub image: Vec<usize>,
    /// Sorted, duplicate-free offsets in `[0, N_T_eff)`.
    pub text: Vec<usize>,
}

impl MaskPlan {
    pub fn empty() -> Self {
        Self::default()
    }

    pub fn is_empty(&self) -> bool {
        self.image.is_empty() && self.text.is_empty()
    }
}

/// Uniform choice of `count` distinct offsets in `[0, n)`, returned sorted.
pub fn choose_positions<R: Rng>(rng: &mut R, n: usize, count: usize) -> Vec<usize> {
    let mut v = index::sample(rng, n, count.min(n)).into_vec();
    v.sort_unstable();
    v
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Schedules {
    pub image: Schedule,
    pub text: Schedule,
}

impl Default for Schedules {
    fn default() -> Self {
        Self {
            image: Schedule::Cosine,
            text: Schedule::Linear,
        }
    }
}

/// Draws a training mask for `task`; `n_text_eff` is the true caption length.
pub fn sample_training_mask<R: Rng>(
    rng: &mut R,
    n_image: usize,
    n_text_eff: usize,
    task: Task,
    schedules: Schedules,
) -> MaskPlan {
    let mut plan = MaskPlan::empty();
    if task.masks_image() {
        let r: f64 = rng.gen();
        let c = mask_count(schedules.image.gamma(r).unwrap(), n_image);
        plan.r_image = Some(r);
        plan.image = choose_positions(rng, n_image, c);
    }
    if task.masks_text() {
        let r: f64 = rng.gen();
        let c = mask_count(schedules.text.gamma(r).unwrap(), n_text_eff);
        plan.r_text = Some(r);
        plan.text = choose_positions(rng, n_text_eff, c);
    }
    plan
}

/// Planned number of masked tokens after step `k` of `total` under the freeze cap.
pub fn decode_mask_count(
    schedule: Schedule,
    k: usize,
    total: usize,
    n: usize,
    unfrozen: usize,
) -> Result<usize> {
    if total == 0 || k > total {
        return Err(Error::Contract(format!("decode step {k} of {total}")));
    }
    let g = schedule.gamma(k as f64 / total as f64)?;
    Ok(mask_count(g, n).min(unfrozen))
}

/// The `count` lowest-confidence candidates; ties go to the lower position.
pub fn select_lowest(confidence: &[f64], candidates: &[usize], count: usize) -> Result<Vec<usize>> {
    if count > candidates.len() {
        return Err(Error::Contract(format!(
            "asked to mask {count} of {} candidates",
            candidates.len()
        )));
    }
    let mut c = candidates.to_vec();
    c.sort_by(|&a, &b| {
        confidence[a]
            .partial_cmp(&confidence[b])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    c.truncate(count);
    c.sort_unstable();
    Ok(c)
}

/// The unrolled re-mask: a later step ratio and fresh positions at its count.
#[derive(Clone, Debug, PartialEq)]
pub struct Remask {
    pub r: f64,
    pub positions: Vec<usize>,
}

/// Draws `r' = r_prev + (1 − r_prev)·u` with `u ∈ (0, 1)` and samples
/// `min(⌈γ(r')·n⌉, prev_count − 1)` fresh positions in `[0, n)`.
pub fn unroll_remask<R: Rng>(
    rng: &mut R,
    r_prev: f64,
    n: usize,
    prev_count: usize,
    schedule: Schedule,
) -> Remask {
    let u = loop {
        let u: f64 = rng.gen();
        if u > 0.0 {
            break u;
        }
    };
    let r = (r_prev + (1.0 - r_prev) * u).min(1.0);
    let count = mask_count(schedule.gamma(r).unwrap(), n).min(prev_count.saturating_sub(1));
    Remask {
        r,
        positions: choose_positions(rng, n, count),
    }
}
