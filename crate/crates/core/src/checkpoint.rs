//! Self-describing binary checkpoint.
//!
//! Layout (all integers little-endian):
//!
//! | offset      | size | content                                   |
//! |-------------|------|-------------------------------------------|
//! | 0           | 4    | magic `ULED`                              |
//! | 4           | 4    | format version (`u32`)                    |
//! | 8           | 8    | metadata length `M` (`u64`)               |
//! | 16          | M    | metadata, UTF-8 JSON                      |
//! | 16 + M      | 4    | tensor count `K` (`u32`)                  |
//! | 20 + M      | ...  | `K` tensor entries                        |
//!
//! Each tensor entry is `name_len: u16`, `name` (UTF-8), `dtype: u8`
//! (1 = f64, 2 = u64), `ndim: u8`, `ndim × u64` dims, then the payload.
//! Parameters come first in canonical order, followed by the running moments
//! of each edited module (`moments.<module>.{dim,count,turns,eps,mu,m2}`).

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::Vocabulary;
use crate::editor::{EditorConfig, EngineState};
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::model::{ModelConfig, Parameters};
use crate::stats::RunningMoments;

pub const MAGIC: &[u8; 4] = b"ULED";
pub const VERSION: u32 = 1;

const DTYPE_F64: u8 = 1;
const DTYPE_U64: u8 = 2;

/// Seeds and stream position recorded alongside the weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct RunMeta {
    pub data_seed: u64,
    pub pretrain_seed: u64,
    /// Edit records consumed so far.
    pub records_consumed: u64,
    pub turn_size: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EditSession {
    pub config: EditorConfig,
    pub state: EngineState,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: Parameters,
    pub vocab: Vocabulary,
    pub meta: RunMeta,
    /// Present once editing has started.
    pub session: Option<EditSession>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Metadata {
    model: ModelConfig,
    vocab: Vec<String>,
    run: RunMeta,
    editor: Option<EditorConfig>,
    turn_index: u64,
    normalized: Vec<bool>,
}

enum Payload {
    F64(Vec<f64>),
    U64(Vec<u64>),
}

struct Tensor {
    name: String,
    dims: Vec<u64>,
    payload: Payload,
}

impl Tensor {
    fn matrix(name: String, m: &Matrix) -> Self {
        Tensor {
            name,
            dims: vec![m.rows() as u64, m.cols() as u64],
            payload: Payload::F64(m.as_slice().to_vec()),
        }
    }

    fn vector(name: String, v: &[f64]) -> Self {
        Tensor {
            name,
            dims: vec![v.len() as u64],
            payload: Payload::F64(v.to_vec()),
        }
    }

    fn scalar_f64(name: String, v: f64) -> Self {
        Tensor {
            name,
            dims: vec![1],
            payload: Payload::F64(vec![v]),
        }
    }

    fn scalar_u64(name: String, v: u64) -> Self {
        Tensor {
            name,
            dims: vec![1],
            payload: Payload::U64(vec![v]),
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

fn write_tensor(out: &mut Vec<u8>, t: &Tensor) {
    let name = t.name.as_bytes();
    out.extend_from_slice(&(name.len() as u16).to_le_bytes());
    out.extend_from_slice(name);
    out.push(match t.payload {
        Payload::F64(_) => DTYPE_F64,
        Payload::U64(_) => DTYPE_U64,
    });
    out.push(t.dims.len() as u8);
    for d in &t.dims {
        out.extend_from_slice(&d.to_le_bytes());
    }
    match &t.payload {
        Payload::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        Payload::U64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
    }
}

fn read_tensor(r: &mut Reader) -> Result<Tensor> {
    let name_len = r.u16()? as usize;
    let name = String::from_utf8(r.take(name_len)?.to_vec())
        .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?;
    let dtype = r.u8()?;
    let ndim = r.u8()? as usize;
    let dims = (0..ndim).map(|_| r.u64()).collect::<Result<Vec<_>>>()?;
    let count = dims
        .iter()
        .try_fold(1u64, |a, &d| a.checked_mul(d))
        .ok_or_else(|| Error::Checkpoint(format!("tensor `{name}` is too large")))? as usize;
    let bytes = r.take(count.checked_mul(8).ok_or_else(|| {
        Error::Checkpoint(format!("tensor `{name}` is too large"))
    })?)?;
    let words = bytes.chunks_exact(8).map(|c| c.try_into().expect("8 bytes"));
    let payload = match dtype {
        DTYPE_F64 => Payload::F64(words.map(f64::from_le_bytes).collect()),
        DTYPE_U64 => Payload::U64(words.map(u64::from_le_bytes).collect()),
        other => return Err(Error::Checkpoint(format!("tensor `{name}` has unknown dtype {other}"))),
    };
    Ok(Tensor { name, dims, payload })
}

fn take_named(tensors: &mut Vec<Tensor>, name: &str) -> Result<Tensor> {
    let idx = tensors
        .iter()
        .position(|t| t.name == name)
        .ok_or_else(|| Error::Checkpoint(format!("missing tensor `{name}`")))?;
    Ok(tensors.remove(idx))
}

fn f64s(t: Tensor) -> Result<Vec<f64>> {
    match t.payload {
        Payload::F64(v) => Ok(v),
        Payload::U64(_) => Err(Error::Checkpoint(format!("tensor `{}` should be f64", t.name))),
    }
}

fn scalar_u64(t: Tensor) -> Result<u64> {
    match t.payload {
        Payload::U64(v) if v.len() == 1 => Ok(v[0]),
        _ => Err(Error::Checkpoint(format!("tensor `{}` should be a u64 scalar", t.name))),
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let meta = Metadata {
            model: self.params.config().clone(),
            vocab: self.vocab.words().to_vec(),
            run: self.meta.clone(),
            editor: self.session.as_ref().map(|s| s.config.clone()),
            turn_index: self.session.as_ref().map_or(0, |s| s.state.turn_index),
            normalized: self
                .session
                .as_ref()
                .map_or_else(Vec::new, |s| s.state.normalized.clone()),
        };
        let meta_json = serde_json::to_vec(&meta).map_err(|e| Error::Checkpoint(e.to_string()))?;

        let mut tensors: Vec<Tensor> = self
            .params
            .tensors()
            .into_iter()
            .map(|(n, m)| Tensor::matrix(n, m))
            .collect();
        if let Some(s) = &self.session {
            for (m, mom) in s.config.modules.iter().zip(&s.state.moments) {
                let p = format!("moments.{m}");
                tensors.push(Tensor::scalar_u64(format!("{p}.dim"), mom.dim() as u64));
                tensors.push(Tensor::scalar_u64(format!("{p}.count"), mom.count()));
                tensors.push(Tensor::scalar_u64(format!("{p}.turns"), mom.turns()));
                tensors.push(Tensor::scalar_f64(format!("{p}.eps"), mom.eps()));
                tensors.push(Tensor::vector(format!("{p}.mu"), mom.mu()));
                tensors.push(Tensor::vector(format!("{p}.m2"), mom.m2()));
            }
        }

        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(meta_json.len() as u64).to_le_bytes());
        out.extend_from_slice(&meta_json);
        out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
        for t in &tensors {
            write_tensor(&mut out, t);
        }
        Ok(out)
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = Reader { buf, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Checkpoint("bad magic, not a checkpoint".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!(
                "format version {version} is not supported (expected {VERSION})"
            )));
        }
        let meta_len = r.u64()? as usize;
        let meta: Metadata = serde_json::from_slice(r.take(meta_len)?)
            .map_err(|e| Error::Checkpoint(format!("metadata: {e}")))?;
        let count = r.u32()? as usize;
        let mut tensors = (0..count).map(|_| read_tensor(&mut r)).collect::<Result<Vec<_>>>()?;
        if r.pos != buf.len() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", buf.len() - r.pos)));
        }

        let template = Parameters::init(&meta.model)?;
        let mut named = Vec::new();
        for (name, m) in template.tensors() {
            let t = take_named(&mut tensors, &name)?;
            let dims = t.dims.clone();
            if dims != [m.rows() as u64, m.cols() as u64] {
                return Err(Error::Checkpoint(format!("tensor `{name}` has dims {dims:?}")));
            }
            named.push((name, Matrix::from_vec(m.rows(), m.cols(), f64s(t)?)?));
        }
        let params = Parameters::from_tensors(&meta.model, named)?;
        let vocab = Vocabulary::from_words(meta.vocab)?;

        let session = match meta.editor {
            None => None,
            Some(cfg) => {
                let mut moments = Vec::with_capacity(cfg.modules.len());
                for m in &cfg.modules {
                    let p = format!("moments.{m}");
                    let dim = scalar_u64(take_named(&mut tensors, &format!("{p}.dim"))?)? as usize;
                    let count = scalar_u64(take_named(&mut tensors, &format!("{p}.count"))?)?;
                    let turns = scalar_u64(take_named(&mut tensors, &format!("{p}.turns"))?)?;
                    let eps = f64s(take_named(&mut tensors, &format!("{p}.eps"))?)?;
                    let mu = f64s(take_named(&mut tensors, &format!("{p}.mu"))?)?;
                    let m2 = f64s(take_named(&mut tensors, &format!("{p}.m2"))?)?;
                    if eps.len() != 1 || mu.len() != dim {
                        return Err(Error::Checkpoint(format!("moments for {m} are malformed")));
                    }
                    moments.push(RunningMoments::from_parts(mu, m2, count, turns, eps[0])?);
                }
                let state = EngineState {
                    moments,
                    normalized: meta.normalized,
                    turn_index: meta.turn_index,
                };
                cfg.validate(params.config())?;
                if state.normalized.len() != cfg.modules.len() {
                    return Err(Error::Checkpoint("coverage flags do not match modules".into()));
                }
                Some(EditSession { config: cfg, state })
            }
        };
        if let Some(t) = tensors.first() {
            return Err(Error::Checkpoint(format!("unexpected tensor `{}`", t.name)));
        }
        Ok(Checkpoint {
            params,
            vocab,
            meta: meta.run,
            session,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

/// Serialized bytes of the parameter tensors alone (canonical order).
pub fn parameter_bytes(params: &Parameters) -> Vec<u8> {
    let mut out = Vec::new();
    for (name, m) in params.tensors() {
        write_tensor(&mut out, &Tensor::matrix(name, m));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::editor::Editor;
    use crate::model::{ModuleRef, Slot};

    fn checkpoint(with_session: bool) -> Checkpoint {
        let cfg = ModelConfig {
            vocab_size: 10,
            embed_dim: 4,
            n_blocks: 2,
            mlp_hidden: 6,
            max_seq_len: 8,
            seed: 1,
            ..ModelConfig::default()
        };
        let params = Parameters::init(&cfg).unwrap();
        let vocab = Vocabulary::build(&["a b c d e f"]);
        let session = with_session.then(|| {
            let ecfg = EditorConfig::new(0.3, vec![ModuleRef::new(1, Slot::MlpIn)]);
            let mut state = Editor::new(ecfg.clone(), &cfg).unwrap().into_state();
            state.moments[0]
                .merge_turn(&[0.1; 10], &[0.2; 10], 3)
                .unwrap();
            state.turn_index = 1;
            EditSession { config: ecfg, state }
        });
        Checkpoint {
            params,
            vocab,
            meta: RunMeta {
                data_seed: 4,
                pretrain_seed: 5,
                records_consumed: 3,
                turn_size: 3,
            },
            session,
        }
    }

    #[test]
    fn round_trip_is_byte_identical() {
        for with_session in [false, true] {
            let ck = checkpoint(with_session);
            let bytes = ck.to_bytes().unwrap();
            let back = Checkpoint::from_bytes(&bytes).unwrap();
            assert_eq!(back, ck);
            assert_eq!(back.to_bytes().unwrap(), bytes);
        }
    }

    #[test]
    fn header_layout() {
        let bytes = checkpoint(false).to_bytes().unwrap();
        assert_eq!(&bytes[..4], b"ULED");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), VERSION);
        let m = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        assert!(serde_json::from_slice::<serde_json::Value>(&bytes[16..16 + m]).is_ok());
    }

    #[test]
    fn rejects_other_versions_and_corruption() {
        let mut bytes = checkpoint(true).to_bytes().unwrap();
        let mut v2 = bytes.clone();
        v2[4] = 2;
        assert!(matches!(Checkpoint::from_bytes(&v2), Err(Error::Checkpoint(m)) if m.contains("version")));
        bytes.truncate(bytes.len() - 3);
        assert!(Checkpoint::from_bytes(&bytes).is_err());
        assert!(Checkpoint::from_bytes(b"NOPE").is_err());
    }
}
