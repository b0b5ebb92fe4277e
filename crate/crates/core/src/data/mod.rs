//! Synthetic facts, tokenization and record files.

mod generate;
mod records;
mod vocab;

pub use generate::{
    check_record, gen_synthetic, FactTriple, GenConfig, SyntheticData, MAX_TEMPLATES_PER_RELATION,
};
pub use records::{
    load_base, load_records, save_base, save_records, BaseExample, EditRecord, EDIT_RECORD_FIELDS,
};
pub use vocab::{normalize_text, words, Vocabulary, EOA, PAD, SEP, SPECIALS, UNK};

use crate::error::{Error, Result};
use crate::model::TrainingExample;

/// A tokenized editing case: the prompt (ending in `<sep>`) and the answer
/// (ending in `<eoa>`).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EditInstance {
    pub prompt_tokens: Vec<usize>,
    pub answer_tokens: Vec<usize>,
    /// Whether the trailing `<eoa>` is a supervised label.
    pub label_end_marker: bool,
}

impl EditInstance {
    pub fn new(prompt_tokens: Vec<usize>, answer_tokens: Vec<usize>) -> Result<Self> {
        if prompt_tokens.is_empty() {
            return Err(Error::Encoding("empty prompt".into()));
        }
        if answer_tokens.is_empty() {
            return Err(Error::Encoding("empty answer".into()));
        }
        Ok(EditInstance {
            prompt_tokens,
            answer_tokens,
            label_end_marker: true,
        })
    }

    pub fn tokens(&self) -> Vec<usize> {
        let mut t = self.prompt_tokens.clone();
        t.extend_from_slice(&self.answer_tokens);
        t
    }

    /// True on answer positions; the end marker is included unless
    /// `label_end_marker` is off.
    pub fn label_mask(&self) -> Vec<bool> {
        let p = self.prompt_tokens.len();
        let n = self.answer_tokens.len();
        let mut mask = vec![false; p + n];
        for (i, m) in mask[p..].iter_mut().enumerate() {
            let is_marker = i + 1 == n && self.answer_tokens[i] == EOA;
            *m = self.label_end_marker || !is_marker;
        }
        mask
    }

    pub fn n_labels(&self) -> usize {
        self.label_mask().iter().filter(|&&m| m).count()
    }

    pub fn to_training_example(&self) -> TrainingExample {
        TrainingExample {
            tokens: self.tokens(),
            label_mask: self.label_mask(),
        }
    }
}

/// `question <sep>` / `answer <eoa>` token pair.
pub fn encode_pair(vocab: &Vocabulary, question: &str, answer: &str, strict: bool) -> Result<EditInstance> {
    let mut prompt = vocab.encode_text(question, strict)?;
    prompt.push(SEP);
    let mut ans = vocab.encode_text(answer, strict)?;
    if ans.is_empty() {
        return Err(Error::Encoding("empty answer".into()));
    }
    ans.push(EOA);
    EditInstance::new(prompt, ans)
}

/// Tokenizes the edit prompt and answer of a record.
pub fn encode(vocab: &Vocabulary, record: &EditRecord, strict: bool) -> Result<EditInstance> {
    encode_pair(vocab, &record.edit_prompt, &record.answer, strict)
}

/// Whole-sequence language-modelling examples for base renderings.
pub fn training_corpus(vocab: &Vocabulary, base: &[BaseExample], held_out: bool) -> Result<Vec<TrainingExample>> {
    base.iter()
        .filter(|b| b.held_out == held_out)
        .map(|b| {
            let inst = encode_pair(vocab, &b.question, &b.answer, true)?;
            Ok(TrainingExample::language_model(inst.tokens()))
        })
        .collect()
}
