//! Line-delimited report records.
//!
//! Every line is one JSON object with a `kind` field: `turn`, `eval`,
//! `pretrain` or `error`.

use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::Serialize;
use serde_json::{json, Value};

use crate::editor::TurnReport;
use crate::error::Result;
use crate::eval::EvalReport;

pub struct ReportWriter {
    out: BufWriter<File>,
    /// Include wall-clock timings (these make reports non-reproducible).
    timing: bool,
}

fn tagged<T: Serialize>(kind: &str, body: &T) -> Value {
    let mut v = serde_json::to_value(body).unwrap_or(Value::Null);
    match v.as_object_mut() {
        Some(map) => {
            map.insert("kind".into(), Value::from(kind));
            v
        }
        None => json!({ "kind": kind, "value": v }),
    }
}

impl ReportWriter {
    /// Opens `path` for appending.
    pub fn open(path: &Path, timing: bool) -> Result<Self> {
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        Ok(ReportWriter {
            out: BufWriter::new(file),
            timing,
        })
    }

    pub fn write_value(&mut self, value: &Value) -> Result<()> {
        serde_json::to_writer(&mut self.out, value).map_err(std::io::Error::from)?;
        self.out.write_all(b"\n")?;
        self.out.flush()?;
        Ok(())
    }

    pub fn turn(&mut self, report: &TurnReport) -> Result<()> {
        let mut v = tagged("turn", report);
        if !self.timing {
            if let Some(map) = v.as_object_mut() {
                map.remove("wall_time_secs");
            }
        }
        self.write_value(&v)
    }

    pub fn eval(&mut self, report: &EvalReport) -> Result<()> {
        self.write_value(&tagged("eval", report))
    }

    pub fn record<T: Serialize>(&mut self, kind: &str, body: &T) -> Result<()> {
        self.write_value(&tagged(kind, body))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::editor::ModuleTurnReport;

    #[test]
    fn appends_one_object_per_line() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.jsonl");
        let report = TurnReport {
            turn_index: 3,
            modules: vec![ModuleTurnReport {
                module: "0.mlp_in".into(),
                rows: 7,
                residual: 1e-12,
                tolerance: 1e-8,
                delta_norm: 0.5,
                condition_estimate: 3.0,
                flagged: false,
            }],
            wall_time_secs: 0.25,
            state_bytes: 100,
        };
        ReportWriter::open(&path, false).unwrap().turn(&report).unwrap();
        ReportWriter::open(&path, true).unwrap().turn(&report).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let lines: Vec<Value> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
        assert_eq!(lines.len(), 2);
        assert_eq!(lines[0]["kind"], "turn");
        assert!(lines[0].get("wall_time_secs").is_none());
        assert_eq!(lines[1]["wall_time_secs"], 0.25);
    }
}
