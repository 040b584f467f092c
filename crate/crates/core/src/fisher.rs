//! Diagonal empirical Fisher information and its running average over tasks.

use rand::seq::index::sample;
use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::Network;
use crate::tasks::Dataset;

/// Datapoints per forward/backward chunk while estimating.
const CHUNK: usize = 256;

/// Per-parameter Fisher values, aligned with [`Network::params`].
#[derive(Debug, Clone, PartialEq)]
pub struct FisherVector {
    pub values: Vec<f64>,
    /// Number of tasks folded into the average.
    pub task_count: usize,
}

impl FisherVector {
    /// The prior: every entry equal to `f0`, no tasks seen.
    pub fn prior(len: usize, f0: f64) -> Self {
        FisherVector {
            values: vec![f0; len],
            task_count: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// Draws an index from a probability row by inverse CDF.
fn sample_class<R: Rng + ?Sized>(probs: ndarray::ArrayView1<'_, f64>, rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (k, &p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return k;
        }
    }
    probs.len() - 1
}

/// Mean over datapoints of the squared score `(∂ ln p(y|x)/∂θ)²`, with one
/// label `y` sampled per datapoint from the model's own softmax. Only the
/// backbone and the head of `task_id` can be nonzero.
///
/// `max_samples` restricts the estimate to a seeded random subset.
pub fn estimate_fisher<R: Rng + ?Sized>(
    net: &Network,
    data: &Dataset,
    task_id: usize,
    rng: &mut R,
    max_samples: Option<usize>,
) -> Result<FisherVector> {
    if data.is_empty() {
        return Err(Error::EmptyData("fisher estimation set"));
    }
    let positions: Vec<usize> = match max_samples {
        Some(m) if m < data.len() => {
            let mut picked = sample(rng, data.len(), m).into_vec();
            picked.sort_unstable();
            picked
        }
        _ => (0..data.len()).collect(),
    };
    let mut values = vec![0.0; net.num_params()];
    for chunk in positions.chunks(CHUNK) {
        let inputs = data.gather(chunk);
        net.accumulate_squared_score(inputs.view(), task_id, |probs| sample_class(probs, rng), &mut values)?;
    }
    let n = positions.len() as f64;
    for v in &mut values {
        *v /= n;
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("fisher information"));
    }
    Ok(FisherVector { values, task_count: 1 })
}

/// `(t·prev + current) / (t + 1)` element-wise; the result counts `t` tasks.
pub fn fisher_recursion(prev: &FisherVector, current: &FisherVector, t: usize) -> Result<FisherVector> {
    if t == 0 {
        return Err(Error::config("t", "must be at least 1"));
    }
    if prev.len() != current.len() {
        return Err(Error::Misaligned {
            expected: prev.len(),
            got: current.len(),
        });
    }
    let tf = t as f64;
    let values = prev
        .values
        .iter()
        .zip(&current.values)
        .map(|(&p, &c)| (tf * p + c) / (tf + 1.0))
        .collect();
    Ok(FisherVector { values, task_count: t })
}
