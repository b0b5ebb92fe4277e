//! Synthetic fact generation.
//!
//! Facts are (subject, relation, object) triples over invented entity names,
//! so a model can only know them by being trained or edited. The
//! (subject, relation) pairs of base facts and edit facts are disjoint, and
//! answers never occur inside any question built from a fact.

use std::collections::{BTreeSet, HashSet};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::records::{BaseExample, EditRecord};
use super::vocab::normalize_text;
use crate::error::{Error, Result};

/// Question templates per relation; `{s}` is replaced by the subject.
const RELATIONS: [(&str, [&str; 4]); 8] = [
    (
        "capital",
        [
            "what is the capital of {s}",
            "{s} has its capital in which city",
            "the capital city of {s} is called",
            "which city serves as the capital of {s}",
        ],
    ),
    (
        "language",
        [
            "which language is spoken in {s}",
            "the main language of {s} is",
            "people in {s} speak which language",
            "what language do residents of {s} use",
        ],
    ),
    (
        "founder",
        [
            "who founded {s}",
            "{s} was founded by",
            "the founder of {s} is",
            "name the person who founded {s}",
        ],
    ),
    (
        "currency",
        [
            "what currency does {s} use",
            "the currency used in {s} is",
            "in {s} people pay with which currency",
            "which money is accepted by {s}",
        ],
    ),
    (
        "river",
        [
            "which river flows through {s}",
            "the river running through {s} is",
            "{s} lies on which river",
            "name the river that crosses {s}",
        ],
    ),
    (
        "sport",
        [
            "what sport is popular in {s}",
            "the favourite sport of {s} is",
            "people from {s} mostly play which sport",
            "which game is most loved in {s}",
        ],
    ),
    (
        "leader",
        [
            "who leads {s}",
            "the current leader of {s} is",
            "{s} is governed by whom",
            "name the leader in charge of {s}",
        ],
    ),
    (
        "flag",
        [
            "what colour is the flag of {s}",
            "the flag of {s} has which colour",
            "{s} flies a flag of what colour",
            "which colour marks the banner of {s}",
        ],
    ),
];

pub const MAX_TEMPLATES_PER_RELATION: usize = 4;

const ONSETS: [&str; 16] = [
    "b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z", "br", "dr",
];
const VOWELS: [&str; 5] = ["a", "e", "i", "o", "u"];
const CODAS: [&str; 6] = ["k", "n", "r", "s", "th", "x"];
/// Answer entities per relation. Each entity is a fixed phrase of 1 to 3
/// words and no word is shared between entities.
const OBJECT_POOL: usize = 24;

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct FactTriple {
    pub subject: String,
    pub relation: String,
    pub object: String,
}

impl FactTriple {
    /// The question for template `k` of this fact's relation.
    pub fn question(&self, k: usize) -> String {
        let (_, templates) = RELATIONS
            .iter()
            .find(|(r, _)| *r == self.relation)
            .expect("relation comes from the template table");
        templates[k].replace("{s}", &self.subject)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GenConfig {
    pub n_base_facts: usize,
    pub n_edit_facts: usize,
    pub templates_per_relation: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticData {
    pub base_facts: Vec<FactTriple>,
    pub edit_facts: Vec<FactTriple>,
    /// Every rendering of every base fact.
    pub base: Vec<BaseExample>,
    /// One record per edit fact, aligned with `edit_facts`.
    pub records: Vec<EditRecord>,
}

/// Builds opaque words; subjects end in a consonant, answer words in a vowel,
/// so the two sets never collide.
fn opaque_word(rng: &mut ChaCha8Rng, syllables: usize, consonant_end: bool) -> String {
    let mut w = String::new();
    for _ in 0..syllables {
        w.push_str(ONSETS[rng.gen_range(0..ONSETS.len())]);
        w.push_str(VOWELS[rng.gen_range(0..VOWELS.len())]);
    }
    if consonant_end {
        w.push_str(CODAS[rng.gen_range(0..CODAS.len())]);
    }
    w
}

fn unique_words(
    rng: &mut ChaCha8Rng,
    n: usize,
    consonant_end: bool,
    taken: &mut HashSet<String>,
) -> Vec<String> {
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let syl = if consonant_end { 2 } else { rng.gen_range(2..=3) };
        let w = opaque_word(rng, syl, consonant_end);
        if taken.insert(w.clone()) {
            out.push(w);
        }
    }
    out
}

fn answer_length(rng: &mut ChaCha8Rng) -> usize {
    match rng.gen_range(0..20) {
        0..=9 => 1,
        10..=16 => 2,
        _ => 3,
    }
}

fn contains_phrase(text: &str, phrase: &str) -> bool {
    let text = format!(" {} ", normalize_text(text));
    let phrase = format!(" {} ", normalize_text(phrase));
    text.contains(&phrase)
}

/// Checks the structural rules of one generated record against its fact.
pub fn check_record(record: &EditRecord, fact: &FactTriple) -> Result<()> {
    let fail = |msg: &str| Err(Error::Generation(format!("{msg}: {record:?}")));
    if !contains_phrase(&record.edit_prompt, &fact.subject) {
        return fail("subject missing from edit prompt");
    }
    if normalize_text(&record.answer) != normalize_text(&fact.object) {
        return fail("answer differs from the fact's object");
    }
    for prompt in [&record.edit_prompt, &record.rephrase_prompt, &record.unrelated_prompt] {
        if contains_phrase(prompt, &record.answer) {
            return fail("answer leaks into a prompt");
        }
    }
    if normalize_text(&record.rephrase_prompt) == normalize_text(&record.edit_prompt) {
        return fail("rephrase equals edit prompt");
    }
    if contains_phrase(&record.unrelated_prompt, &record.unrelated_answer) {
        return fail("unrelated answer leaks into its prompt");
    }
    Ok(())
}

pub fn gen_synthetic(cfg: &GenConfig) -> Result<SyntheticData> {
    if cfg.n_base_facts == 0 || cfg.n_edit_facts == 0 {
        return Err(Error::Generation("fact counts must be at least 1".into()));
    }
    if cfg.templates_per_relation < 2 {
        return Err(Error::Generation(
            "at least 2 templates per relation are needed for paraphrases".into(),
        ));
    }
    if cfg.templates_per_relation > MAX_TEMPLATES_PER_RELATION {
        return Err(Error::Generation(format!(
            "{} templates per relation requested, only {MAX_TEMPLATES_PER_RELATION} exist",
            cfg.templates_per_relation
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let total = cfg.n_base_facts + cfg.n_edit_facts;
    let n_relations = RELATIONS.len();
    let n_subjects = (total * 5).div_ceil(4 * n_relations).max(1);

    let mut taken: HashSet<String> = RELATIONS
        .iter()
        .flat_map(|(_, ts)| ts.iter().flat_map(|t| t.split_whitespace()))
        .map(str::to_owned)
        .collect();
    let subjects = unique_words(&mut rng, n_subjects, true, &mut taken);
    let pools: Vec<Vec<String>> = (0..n_relations)
        .map(|_| {
            (0..OBJECT_POOL)
                .map(|_| {
                    let len = answer_length(&mut rng);
                    unique_words(&mut rng, len, false, &mut taken).join(" ")
                })
                .collect()
        })
        .collect();

    let mut pairs: Vec<(usize, usize)> = (0..n_subjects)
        .flat_map(|s| (0..n_relations).map(move |r| (s, r)))
        .collect();
    pairs.shuffle(&mut rng);
    pairs.truncate(total);

    let mut make_fact = |&(s, r): &(usize, usize)| {
        FactTriple {
            subject: subjects[s].clone(),
            relation: RELATIONS[r].0.to_owned(),
            object: pools[r][rng.gen_range(0..OBJECT_POOL)].clone(),
        }
    };
    let base_facts: Vec<FactTriple> = pairs[..cfg.n_base_facts].iter().map(&mut make_fact).collect();
    let edit_facts: Vec<FactTriple> = pairs[cfg.n_base_facts..].iter().map(&mut make_fact).collect();

    let t = cfg.templates_per_relation;
    let mut base = Vec::with_capacity(base_facts.len() * t);
    for fact in &base_facts {
        let held_out = rng.gen_range(1..t);
        for k in 0..t {
            base.push(BaseExample {
                question: fact.question(k),
                answer: fact.object.clone(),
                held_out: k == held_out,
                probe: k == 0,
            });
        }
    }

    let mut unrelated_order: Vec<usize> = (0..base_facts.len()).collect();
    unrelated_order.shuffle(&mut rng);
    let mut records = Vec::with_capacity(edit_facts.len());
    for (i, fact) in edit_facts.iter().enumerate() {
        let edit_k = rng.gen_range(0..t);
        let rephrase_k = (edit_k + rng.gen_range(1..t)) % t;
        let probe = &base_facts[unrelated_order[i % unrelated_order.len()]];
        let record = EditRecord {
            edit_prompt: fact.question(edit_k),
            answer: fact.object.clone(),
            rephrase_prompt: fact.question(rephrase_k),
            unrelated_prompt: probe.question(0),
            unrelated_answer: probe.object.clone(),
        };
        check_record(&record, fact)?;
        records.push(record);
    }

    Ok(SyntheticData {
        base_facts,
        edit_facts,
        base,
        records,
    })
}

impl SyntheticData {
    /// Every string a tokenizer must cover.
    pub fn corpus_strings(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for b in &self.base {
            out.push(b.question.clone());
            out.push(b.answer.clone());
        }
        for r in &self.records {
            out.extend([
                r.edit_prompt.clone(),
                r.answer.clone(),
                r.rephrase_prompt.clone(),
            ]);
        }
        out
    }

    /// (subject, relation) pairs shared between base and edit facts.
    pub fn overlapping_pairs(&self) -> usize {
        let base: BTreeSet<(&str, &str)> = self
            .base_facts
            .iter()
            .map(|f| (f.subject.as_str(), f.relation.as_str()))
            .collect();
        self.edit_facts
            .iter()
            .filter(|f| base.contains(&(f.subject.as_str(), f.relation.as_str())))
            .count()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(nb: usize, ne: usize, t: usize) -> GenConfig {
        GenConfig {
            n_base_facts: nb,
            n_edit_facts: ne,
            templates_per_relation: t,
            seed: 9,
        }
    }

    #[test]
    fn deterministic_for_a_seed() {
        let a = gen_synthetic(&cfg(40, 20, 3)).unwrap();
        let b = gen_synthetic(&cfg(40, 20, 3)).unwrap();
        assert_eq!(a, b);
        let c = gen_synthetic(&GenConfig { seed: 10, ..cfg(40, 20, 3) }).unwrap();
        assert_ne!(a.records, c.records);
    }

    #[test]
    fn thousand_records_pass_validation() {
        let data = gen_synthetic(&cfg(1500, 1000, 3)).unwrap();
        assert_eq!(data.records.len(), 1000);
        let pairs: BTreeSet<_> = data
            .edit_facts
            .iter()
            .map(|f| (f.subject.clone(), f.relation.clone()))
            .collect();
        assert_eq!(pairs.len(), 1000);
        assert_eq!(data.overlapping_pairs(), 0);
        for (r, f) in data.records.iter().zip(&data.edit_facts) {
            check_record(r, f).unwrap();
            let words = r.answer.split_whitespace().count();
            assert!((1..=3).contains(&words));
        }
    }

    #[test]
    fn answer_words_belong_to_one_entity() {
        let data = gen_synthetic(&cfg(400, 100, 3)).unwrap();
        let mut owner: std::collections::HashMap<&str, &str> = Default::default();
        for f in data.base_facts.iter().chain(&data.edit_facts) {
            for w in f.object.split_whitespace() {
                assert_eq!(*owner.entry(w).or_insert(&f.object), f.object.as_str());
            }
        }
    }

    #[test]
    fn base_renderings_mark_probe_and_held_out() {
        let data = gen_synthetic(&cfg(30, 5, 3)).unwrap();
        assert_eq!(data.base.len(), 90);
        for chunk in data.base.chunks(3) {
            assert!(chunk[0].probe && !chunk[0].held_out);
            assert_eq!(chunk.iter().filter(|b| b.held_out).count(), 1);
        }
    }

    #[test]
    fn template_exhaustion_is_an_error() {
        assert!(matches!(gen_synthetic(&cfg(5, 5, 5)), Err(Error::Generation(_))));
        assert!(matches!(gen_synthetic(&cfg(5, 5, 1)), Err(Error::Generation(_))));
        assert!(matches!(gen_synthetic(&cfg(0, 5, 3)), Err(Error::Generation(_))));
    }

    #[test]
    fn validator_catches_leaks() {
        let fact = FactTriple {
            subject: "zorak".into(),
            relation: "capital".into(),
            object: "belu".into(),
        };
        let mut r = EditRecord {
            edit_prompt: fact.question(0),
            answer: "belu".into(),
            rephrase_prompt: fact.question(1),
            unrelated_prompt: "who leads tamex".into(),
            unrelated_answer: "rivo".into(),
        };
        check_record(&r, &fact).unwrap();
        r.rephrase_prompt = "is belu the capital of zorak".into();
        assert!(check_record(&r, &fact).is_err());
    }
}
