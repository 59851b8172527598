//! Categorical sampling restricted to an id range.

use rand::Rng;

use magvlt_ndnum::Scalar;

/// Which ids a sampler may emit.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct IdRange {
    pub lo: usize,
    pub hi: usize,
    /// One extra admissible id outside `[lo, hi)`.
    pub extra: Option<usize>,
}

impl IdRange {
    pub fn new(lo: usize, hi: usize) -> Self {
        Self { lo, hi, extra: None }
    }

    pub fn with_extra(self, id: usize) -> Self {
        Self {
            extra: Some(id),
            ..self
        }
    }

    pub fn contains(&self, id: usize) -> bool {
        (self.lo..self.hi).contains(&id) || self.extra == Some(id)
    }

    fn ids(&self) -> impl Iterator<Item = usize> + '_ {
        (self.lo..self.hi).chain(self.extra)
    }
}

/// Log-probabilities of the admissible ids under `softmax(row / temperature)`,
/// paired with their ids. Temperature 0 is treated as 1 here.
pub fn range_log_probs<T: Scalar>(row: &[T], range: IdRange, temperature: f64) -> Vec<(usize, f64)> {
    let t = if temperature > 0.0 { temperature } else { 1.0 };
    let z: Vec<(usize, f64)> = range.ids().map(|i| (i, row[i].to_f64().unwrap() / t)).collect();
    let m = z.iter().map(|p| p.1).fold(f64::NEG_INFINITY, f64::max);
    let lse = m + z.iter().map(|p| (p.1 - m).exp()).sum::<f64>().ln();
    z.into_iter().map(|(i, v)| (i, v - lse)).collect()
}

/// Draws one id from the admissible range; temperature 0 is greedy with
/// ties going to the lower id. Returns the id and its log-probability.
pub fn sample_range<T: Scalar, R: Rng>(
    row: &[T],
    range: IdRange,
    temperature: f64,
    rng: &mut R,
) -> (usize, f64) {
    let lp = range_log_probs(row, range, temperature);
    if temperature <= 0.0 {
        return lp
            .into_iter()
            .fold((usize::MAX, f64::NEG_INFINITY), |best, c| if c.1 > best.1 { c } else { best });
    }
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for &(i, l) in &lp {
        acc += l.exp();
        if u < acc {
            return (i, l);
        }
    }
    *lp.last().unwrap()
}

/// Standard Gumbel noise.
pub fn gumbel<R: Rng>(rng: &mut R) -> f64 {
    let u: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    -(-u.ln()).ln()
}

pub fn argmax<T: Scalar>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}
