use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::forward::argmax;
use super::Parameters;

/// One teacher-forced training sequence.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TrainingExample {
    pub tokens: Vec<usize>,
    pub label_mask: Vec<bool>,
}

impl TrainingExample {
    /// Every position after the first is a target.
    pub fn language_model(tokens: Vec<usize>) -> Self {
        let label_mask = (0..tokens.len()).map(|t| t > 0).collect();
        TrainingExample { tokens, label_mask }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretrainConfig {
    pub steps: usize,
    pub step_size: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            steps: 5000,
            step_size: 0.05,
            batch_size: 16,
            seed: 0,
        }
    }
}

/// Minibatch gradient descent with a fixed step size.
///
/// Examples are visited in epochs, each a fresh permutation drawn from
/// `cfg.seed`. The update uses the batch-mean gradient.
pub fn pretrain(
    params: &Parameters,
    corpus: &[TrainingExample],
    cfg: &PretrainConfig,
) -> Result<Parameters> {
    pretrain_with(params, corpus, cfg, |_, _| {})
}

/// [`pretrain`] with a per-step callback receiving `(step, mean batch loss)`.
pub fn pretrain_with(
    params: &Parameters,
    corpus: &[TrainingExample],
    cfg: &PretrainConfig,
    mut on_step: impl FnMut(usize, f64),
) -> Result<Parameters> {
    if corpus.is_empty() {
        return Err(Error::EmptyBatch("pretraining corpus"));
    }
    if cfg.batch_size == 0 {
        return Err(Error::Config("batch_size must be at least 1".into()));
    }
    let mut params = params.clone();
    if cfg.steps == 0 {
        return Ok(params);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    let mut cursor = order.len();
    let mut grads = params.zeros_like();
    for step in 0..cfg.steps {
        for (_, t) in grads.tensors_mut() {
            t.as_mut_slice().fill(0.0);
        }
        let mut batch_loss = 0.0;
        for _ in 0..cfg.batch_size {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            let ex = &corpus[order[cursor]];
            cursor += 1;
            let (loss, _, _) = params.accumulate_grads(&ex.tokens, &ex.label_mask, &[], &mut grads)?;
            batch_loss += loss;
        }
        let batch_loss = batch_loss / cfg.batch_size as f64;
        if !batch_loss.is_finite() {
            return Err(Error::Training {
                step,
                loss: batch_loss,
            });
        }
        params.axpy(-cfg.step_size / cfg.batch_size as f64, &grads);
        if !params.is_finite() {
            return Err(Error::Training {
                step,
                loss: f64::NAN,
            });
        }
        on_step(step, batch_loss);
    }
    Ok(params)
}

/// Appends argmax tokens until `max_new` tokens were produced or `stop` was
/// emitted (the stop token is included in the output).
pub fn greedy_decode(
    params: &Parameters,
    prompt: &[usize],
    max_new: usize,
    stop: Option<usize>,
) -> Result<Vec<usize>> {
    let limit = params.config().max_seq_len;
    if prompt.len() + max_new > limit {
        return Err(Error::Length {
            len: prompt.len() + max_new,
            max: limit,
        });
    }
    let mut seq = prompt.to_vec();
    let mut out = Vec::with_capacity(max_new);
    for _ in 0..max_new {
        let trace = params.forward(&seq, &[])?;
        let next = argmax(trace.logits.row(seq.len() - 1));
        out.push(next);
        seq.push(next);
        if Some(next) == stop {
            break;
        }
    }
    Ok(out)
}
