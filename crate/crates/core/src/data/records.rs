//! Line-delimited JSON record files.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::{Error, Result};

/// One editing case with its paraphrase and an unrelated probe.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EditRecord {
    pub edit_prompt: String,
    pub answer: String,
    pub rephrase_prompt: String,
    pub unrelated_prompt: String,
    pub unrelated_answer: String,
}

pub const EDIT_RECORD_FIELDS: [&str; 5] = [
    "edit_prompt",
    "answer",
    "rephrase_prompt",
    "unrelated_prompt",
    "unrelated_answer",
];

/// A question/answer pair from the base (pretraining) fact set.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BaseExample {
    pub question: String,
    pub answer: String,
    /// Excluded from pretraining; used for held-out perplexity.
    pub held_out: bool,
    /// The canonical phrasing of the fact, used as a knowledge probe.
    pub probe: bool,
}

const BASE_FIELDS: [&str; 4] = ["question", "answer", "held_out", "probe"];

fn parse_line(
    path: &Path,
    line_no: usize,
    line: &str,
    fields: &[&str],
    strict: bool,
) -> Result<Map<String, Value>> {
    let err = |message: String| Error::Parse {
        path: path.to_path_buf(),
        line: line_no,
        message,
    };
    let value: Value = serde_json::from_str(line).map_err(|e| err(e.to_string()))?;
    let Value::Object(map) = value else {
        return Err(err("expected a JSON object".into()));
    };
    for f in fields {
        if !map.contains_key(*f) {
            return Err(err(format!("missing field `{f}`")));
        }
    }
    if strict {
        if let Some(k) = map.keys().find(|k| !fields.contains(&k.as_str())) {
            return Err(err(format!("unknown field `{k}`")));
        }
    }
    Ok(map)
}

fn string_field(map: &Map<String, Value>, key: &str, path: &Path, line: usize) -> Result<String> {
    map[key]
        .as_str()
        .map(str::to_owned)
        .ok_or_else(|| Error::Parse {
            path: path.to_path_buf(),
            line,
            message: format!("field `{key}` must be a string"),
        })
}

fn bool_field(map: &Map<String, Value>, key: &str, path: &Path, line: usize) -> Result<bool> {
    map[key].as_bool().ok_or_else(|| Error::Parse {
        path: path.to_path_buf(),
        line,
        message: format!("field `{key}` must be a boolean"),
    })
}

fn non_blank_lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty())
}

/// Reads an edit-record file. With `strict`, fields beyond the five known
/// ones are rejected.
pub fn load_records(path: &Path, strict: bool) -> Result<Vec<EditRecord>> {
    let text = fs::read_to_string(path)?;
    non_blank_lines(&text)
        .map(|(n, line)| {
            let map = parse_line(path, n, line, &EDIT_RECORD_FIELDS, strict)?;
            Ok(EditRecord {
                edit_prompt: string_field(&map, "edit_prompt", path, n)?,
                answer: string_field(&map, "answer", path, n)?,
                rephrase_prompt: string_field(&map, "rephrase_prompt", path, n)?,
                unrelated_prompt: string_field(&map, "unrelated_prompt", path, n)?,
                unrelated_answer: string_field(&map, "unrelated_answer", path, n)?,
            })
        })
        .collect()
}

pub fn load_base(path: &Path, strict: bool) -> Result<Vec<BaseExample>> {
    let text = fs::read_to_string(path)?;
    non_blank_lines(&text)
        .map(|(n, line)| {
            let map = parse_line(path, n, line, &BASE_FIELDS, strict)?;
            Ok(BaseExample {
                question: string_field(&map, "question", path, n)?,
                answer: string_field(&map, "answer", path, n)?,
                held_out: bool_field(&map, "held_out", path, n)?,
                probe: bool_field(&map, "probe", path, n)?,
            })
        })
        .collect()
}

fn save_lines<T: Serialize>(items: &[T], path: &Path) -> Result<()> {
    let mut out = BufWriter::new(fs::File::create(path)?);
    for item in items {
        serde_json::to_writer(&mut out, item).map_err(std::io::Error::from)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

pub fn save_records(records: &[EditRecord], path: &Path) -> Result<()> {
    save_lines(records, path)
}

pub fn save_base(examples: &[BaseExample], path: &Path) -> Result<()> {
    save_lines(examples, path)
}
