//! Exact-match editing metrics and held-out perplexity.

use serde::{Deserialize, Serialize};

use crate::data::{encode_pair, EditRecord, Vocabulary, EOA};
use crate::error::{Error, Result};
use crate::model::{argmax, greedy_decode, Parameters, TrainingExample};

/// True iff, with the true answer fed as context, every answer token
/// (including the end marker) is the argmax prediction.
pub fn exact_match(params: &Parameters, prompt: &[usize], answer: &[usize]) -> Result<bool> {
    if prompt.is_empty() || answer.is_empty() {
        return Ok(false);
    }
    let mut tokens = prompt.to_vec();
    tokens.extend_from_slice(answer);
    let trace = params.forward(&tokens, &[])?;
    let p = prompt.len();
    Ok(answer
        .iter()
        .enumerate()
        .all(|(i, &tok)| argmax(trace.logits.row(p + i - 1)) == tok))
}

/// Greedy decoding from `prompt` reproduces `answer` exactly.
pub fn greedy_match(params: &Parameters, prompt: &[usize], answer: &[usize]) -> Result<bool> {
    let stop = (answer.last() == Some(&EOA)).then_some(EOA);
    Ok(greedy_decode(params, prompt, answer.len(), stop)? == answer)
}

/// Per-record hit vectors.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RecordScores {
    pub edit: Vec<bool>,
    pub edit_greedy: Vec<bool>,
    pub rephrase: Vec<bool>,
    pub unrelated: Vec<bool>,
}

pub fn score_records(params: &Parameters, records: &[EditRecord], vocab: &Vocabulary) -> Result<RecordScores> {
    let mut s = RecordScores {
        edit: Vec::with_capacity(records.len()),
        edit_greedy: Vec::with_capacity(records.len()),
        rephrase: Vec::with_capacity(records.len()),
        unrelated: Vec::with_capacity(records.len()),
    };
    for r in records {
        let e = encode_pair(vocab, &r.edit_prompt, &r.answer, false)?;
        s.edit.push(exact_match(params, &e.prompt_tokens, &e.answer_tokens)?);
        s.edit_greedy.push(greedy_match(params, &e.prompt_tokens, &e.answer_tokens)?);
        let g = encode_pair(vocab, &r.rephrase_prompt, &r.answer, false)?;
        s.rephrase.push(exact_match(params, &g.prompt_tokens, &g.answer_tokens)?);
        let u = encode_pair(vocab, &r.unrelated_prompt, &r.unrelated_answer, false)?;
        s.unrelated.push(exact_match(params, &u.prompt_tokens, &u.answer_tokens)?);
    }
    Ok(s)
}

fn fraction(hits: &[bool]) -> f64 {
    if hits.is_empty() {
        return 0.0;
    }
    hits.iter().filter(|&&h| h).count() as f64 / hits.len() as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub n_records: usize,
    pub efficacy: f64,
    /// Efficacy measured by free-running greedy decoding.
    pub efficacy_greedy: f64,
    pub generalization: f64,
    /// Raw accuracy on the unrelated probes.
    pub specificity: f64,
    /// Fraction of probes the pre-edit model answered that are still answered.
    pub specificity_retained: f64,
    pub perplexity_before: f64,
    pub perplexity_after: f64,
}

/// Scores the edited model `post` against `records`, using `pre` (the model
/// before any edit) for the retained-specificity baseline and the perplexity
/// reference on `held_out`. Both perplexities are NaN when `held_out` is
/// empty.
pub fn evaluate(
    pre: &Parameters,
    post: &Parameters,
    records: &[EditRecord],
    vocab: &Vocabulary,
    held_out: &[TrainingExample],
) -> Result<EvalReport> {
    if records.is_empty() {
        return Err(Error::EmptyBatch("evaluation records"));
    }
    let after = score_records(post, records, vocab)?;
    let mut known = 0usize;
    let mut kept = 0usize;
    for (r, &hit_after) in records.iter().zip(&after.unrelated) {
        let u = encode_pair(vocab, &r.unrelated_prompt, &r.unrelated_answer, false)?;
        if exact_match(pre, &u.prompt_tokens, &u.answer_tokens)? {
            known += 1;
            kept += usize::from(hit_after);
        }
    }
    let (perplexity_before, perplexity_after) = if held_out.is_empty() {
        (f64::NAN, f64::NAN)
    } else {
        (perplexity(pre, held_out)?, perplexity(post, held_out)?)
    };
    Ok(EvalReport {
        n_records: records.len(),
        efficacy: fraction(&after.edit),
        efficacy_greedy: fraction(&after.edit_greedy),
        generalization: fraction(&after.rephrase),
        specificity: fraction(&after.unrelated),
        specificity_retained: if known == 0 { 1.0 } else { kept as f64 / known as f64 },
        perplexity_before,
        perplexity_after,
    })
}

/// `exp` of the mean next-token cross-entropy over every position that has a
/// successor.
pub fn perplexity(params: &Parameters, corpus: &[TrainingExample]) -> Result<f64> {
    let mut total = 0.0;
    let mut count = 0usize;
    for ex in corpus {
        if ex.tokens.len() < 2 {
            continue;
        }
        let trace = params.forward(&ex.tokens, &[])?;
        for t in 1..ex.tokens.len() {
            let row = trace.logits.row(t - 1);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
            total += lse - row[ex.tokens[t]];
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::EmptyBatch("perplexity corpus has no predictable tokens"));
    }
    Ok((total / count as f64).exp())
}

/// Fraction of `(question, answer)` pairs answered exactly.
pub fn probe_accuracy(params: &Parameters, vocab: &Vocabulary, pairs: &[(String, String)]) -> Result<f64> {
    let mut hits = Vec::with_capacity(pairs.len());
    for (q, a) in pairs {
        let inst = encode_pair(vocab, q, a, false)?;
        hits.push(exact_match(params, &inst.prompt_tokens, &inst.answer_tokens)?);
    }
    Ok(fraction(&hits))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::SEP;
    use crate::linalg::Matrix;
    use crate::model::ModelConfig;

    fn model(vocab: usize) -> Parameters {
        Parameters::init(&ModelConfig {
            vocab_size: vocab,
            embed_dim: 8,
            n_blocks: 1,
            mlp_hidden: 8,
            max_seq_len: 12,
            seed: 17,
            ..ModelConfig::default()
        })
        .unwrap()
    }

    #[test]
    fn uniform_model_perplexity_is_vocab_size() {
        let mut p = model(11);
        p.head = Matrix::zeros(8, 11);
        let corpus = vec![TrainingExample::language_model(vec![4, 5, 6, 7])];
        assert!((perplexity(&p, &corpus).unwrap() - 11.0).abs() < 1e-9);
    }

    #[test]
    fn perplexity_matches_log_sum_exp_recomputation() {
        let p = model(13);
        let corpus = vec![
            TrainingExample::language_model(vec![4, 5, 6]),
            TrainingExample::language_model(vec![7, 8, 9, 10, 11]),
        ];
        let got = perplexity(&p, &corpus).unwrap();
        let mut total = 0.0;
        let mut n = 0.0;
        for ex in &corpus {
            let logits = p.forward(&ex.tokens, &[]).unwrap().logits;
            for t in 1..ex.tokens.len() {
                let row = logits.row(t - 1);
                let z: f64 = row.iter().map(|l| l.exp()).sum();
                total += -(row[ex.tokens[t]].exp() / z).ln();
                n += 1.0;
            }
        }
        let oracle = (total / n).exp();
        assert!((got - oracle).abs() <= 1e-9 * oracle);
        assert!(got >= 1.0);
    }

    #[test]
    fn own_greedy_continuation_is_an_exact_match() {
        let p = model(16);
        let prompt = vec![4, 9, SEP];
        let cont = greedy_decode(&p, &prompt, 4, None).unwrap();
        assert!(exact_match(&p, &prompt, &cont).unwrap());
        assert!(greedy_match(&p, &prompt, &cont).unwrap());
    }

    #[test]
    fn non_argmax_answer_is_a_miss() {
        let p = model(16);
        let prompt = vec![4, 9, SEP];
        let best = greedy_decode(&p, &prompt, 1, None).unwrap()[0];
        let other = (best + 1) % 16;
        assert!(!exact_match(&p, &prompt, &[other]).unwrap());
    }
}
