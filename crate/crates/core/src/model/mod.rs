//! A small pre-norm decoder with hand-written reverse-mode differentiation.
//!
//! Layout per block:
//!
//! ```text
//! x ─ LN ─ single-head causal attention ─(+)─ LN ─ mlp_in ─ GELU ─ mlp_out ─(+)─
//! ```
//!
//! `mlp_in` and `mlp_out` are the editable linear modules. Their weights are
//! stored `input × output`, so an edit `Δ` maps a module input `h` to the
//! output correction `h·Δ`.

mod forward;
mod train;

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Matrix;

pub use forward::{argmax, softmax_rows, Backward, ForwardTrace, OutputShift};
pub use train::{greedy_decode, pretrain, pretrain_with, PretrainConfig, TrainingExample};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum LossReduction {
    /// Sum of token cross-entropies over labelled positions.
    #[default]
    Sum,
    /// Mean over labelled positions.
    Mean,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub embed_dim: usize,
    pub n_blocks: usize,
    pub mlp_hidden: usize,
    pub max_seq_len: usize,
    pub seed: u64,
    #[serde(default)]
    pub loss: LossReduction,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            vocab_size: 512,
            embed_dim: 64,
            n_blocks: 2,
            mlp_hidden: 256,
            max_seq_len: 64,
            seed: 0,
            loss: LossReduction::Sum,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("vocab_size", self.vocab_size),
            ("embed_dim", self.embed_dim),
            ("n_blocks", self.n_blocks),
            ("mlp_hidden", self.mlp_hidden),
            ("max_seq_len", self.max_seq_len),
        ];
        for (name, v) in dims {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be at least 1")));
            }
        }
        Ok(())
    }

    /// Closed-form number of scalar parameters.
    pub fn parameter_count(&self) -> usize {
        let (v, d, h, t) = (self.vocab_size, self.embed_dim, self.mlp_hidden, self.max_seq_len);
        let block = 4 * d + 4 * d * d + (d * h + h) + (h * d + d);
        v * d + t * d + self.n_blocks * block + 2 * d + d * v
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Slot {
    MlpIn,
    MlpOut,
}

/// An editable linear module: one of the two MLP projections of a block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ModuleRef {
    pub block: usize,
    pub slot: Slot,
}

impl ModuleRef {
    pub fn new(block: usize, slot: Slot) -> Self {
        ModuleRef { block, slot }
    }

    /// `(input dim, output dim)` of this module's weight.
    pub fn dims(&self, cfg: &ModelConfig) -> (usize, usize) {
        match self.slot {
            Slot::MlpIn => (cfg.embed_dim, cfg.mlp_hidden),
            Slot::MlpOut => (cfg.mlp_hidden, cfg.embed_dim),
        }
    }

    /// Every editable module of a model, in block order.
    pub fn all(cfg: &ModelConfig) -> Vec<ModuleRef> {
        (0..cfg.n_blocks)
            .flat_map(|b| [ModuleRef::new(b, Slot::MlpIn), ModuleRef::new(b, Slot::MlpOut)])
            .collect()
    }
}

impl fmt::Display for ModuleRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let slot = match self.slot {
            Slot::MlpIn => "mlp_in",
            Slot::MlpOut => "mlp_out",
        };
        write!(f, "{}.{}", self.block, slot)
    }
}

impl FromStr for ModuleRef {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (block, slot) = s
            .trim()
            .split_once('.')
            .ok_or_else(|| Error::Config(format!("module `{s}` is not of the form <block>.<slot>")))?;
        let block = block
            .parse()
            .map_err(|_| Error::Config(format!("bad block index in module `{s}`")))?;
        let slot = match slot {
            "mlp_in" => Slot::MlpIn,
            "mlp_out" => Slot::MlpOut,
            other => return Err(Error::Config(format!("unknown module slot `{other}`"))),
        };
        Ok(ModuleRef { block, slot })
    }
}

/// Parses a comma list such as `0.mlp_in,1.mlp_out`.
pub fn parse_module_list(s: &str) -> Result<Vec<ModuleRef>> {
    s.split(',')
        .filter(|p| !p.trim().is_empty())
        .map(str::parse)
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    pub ln1_gain: Matrix,
    pub ln1_bias: Matrix,
    pub w_q: Matrix,
    pub w_k: Matrix,
    pub w_v: Matrix,
    pub w_o: Matrix,
    pub ln2_gain: Matrix,
    pub ln2_bias: Matrix,
    pub mlp_in_w: Matrix,
    pub mlp_in_b: Matrix,
    pub mlp_out_w: Matrix,
    pub mlp_out_b: Matrix,
}

/// Model weights together with the configuration that shapes them.
#[derive(Debug, Clone, PartialEq)]
pub struct Parameters {
    config: ModelConfig,
    pub tok_emb: Matrix,
    pub pos_emb: Matrix,
    pub blocks: Vec<Block>,
    pub lnf_gain: Matrix,
    pub lnf_bias: Matrix,
    pub head: Matrix,
}

fn uniform(rows: usize, cols: usize, bound: f64, rng: &mut ChaCha8Rng) -> Matrix {
    let data = (0..rows * cols).map(|_| rng.gen_range(-bound..bound)).collect();
    Matrix::from_vec(rows, cols, data).expect("sized by construction")
}

fn filled(cols: usize, v: f64) -> Matrix {
    Matrix::from_vec(1, cols, vec![v; cols]).expect("sized by construction")
}

impl Parameters {
    /// Deterministic initialization from `config.seed`.
    pub fn init(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let (v, d, h, t) = (
            config.vocab_size,
            config.embed_dim,
            config.mlp_hidden,
            config.max_seq_len,
        );
        let proj = 1.0 / (d as f64).sqrt();
        let residual = proj / (2.0 * config.n_blocks as f64).sqrt();
        let tok_emb = uniform(v, d, 1.0, &mut rng);
        let pos_emb = uniform(t, d, 0.5, &mut rng);
        let blocks = (0..config.n_blocks)
            .map(|_| Block {
                ln1_gain: filled(d, 1.0),
                ln1_bias: filled(d, 0.0),
                w_q: uniform(d, d, proj, &mut rng),
                w_k: uniform(d, d, proj, &mut rng),
                w_v: uniform(d, d, proj, &mut rng),
                w_o: uniform(d, d, residual, &mut rng),
                ln2_gain: filled(d, 1.0),
                ln2_bias: filled(d, 0.0),
                mlp_in_w: uniform(d, h, proj, &mut rng),
                mlp_in_b: filled(h, 0.0),
                mlp_out_w: uniform(h, d, residual * (d as f64 / h as f64).sqrt(), &mut rng),
                mlp_out_b: filled(d, 0.0),
            })
            .collect();
        let head = uniform(d, v, proj, &mut rng);
        Ok(Parameters {
            config: config.clone(),
            tok_emb,
            pos_emb,
            blocks,
            lnf_gain: filled(d, 1.0),
            lnf_bias: filled(d, 0.0),
            head,
        })
    }

    /// Same shapes as `self`, all zeros (gradient accumulator).
    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for (_, t) in z.tensors_mut() {
            t.as_mut_slice().fill(0.0);
        }
        z
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.as_slice().len()).sum()
    }

    /// Named tensors in a fixed canonical order.
    pub fn tensors(&self) -> Vec<(String, &Matrix)> {
        let mut out: Vec<(String, &Matrix)> = vec![
            ("tok_emb".into(), &self.tok_emb),
            ("pos_emb".into(), &self.pos_emb),
        ];
        for (i, b) in self.blocks.iter().enumerate() {
            for (name, t) in block_fields(b) {
                out.push((format!("blocks.{i}.{name}"), t));
            }
        }
        out.push(("lnf_gain".into(), &self.lnf_gain));
        out.push(("lnf_bias".into(), &self.lnf_bias));
        out.push(("head".into(), &self.head));
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<(String, &mut Matrix)> {
        let mut out: Vec<(String, &mut Matrix)> = vec![
            ("tok_emb".into(), &mut self.tok_emb),
            ("pos_emb".into(), &mut self.pos_emb),
        ];
        for (i, b) in self.blocks.iter_mut().enumerate() {
            let fields: [(&str, &mut Matrix); 12] = [
                ("ln1_gain", &mut b.ln1_gain),
                ("ln1_bias", &mut b.ln1_bias),
                ("w_q", &mut b.w_q),
                ("w_k", &mut b.w_k),
                ("w_v", &mut b.w_v),
                ("w_o", &mut b.w_o),
                ("ln2_gain", &mut b.ln2_gain),
                ("ln2_bias", &mut b.ln2_bias),
                ("mlp_in_w", &mut b.mlp_in_w),
                ("mlp_in_b", &mut b.mlp_in_b),
                ("mlp_out_w", &mut b.mlp_out_w),
                ("mlp_out_b", &mut b.mlp_out_b),
            ];
            for (name, t) in fields {
                out.push((format!("blocks.{i}.{name}"), t));
            }
        }
        out.push(("lnf_gain".into(), &mut self.lnf_gain));
        out.push(("lnf_bias".into(), &mut self.lnf_bias));
        out.push(("head".into(), &mut self.head));
        out
    }

    /// Rebuilds parameters from named tensors; every expected name must be
    /// present with the expected shape.
    pub fn from_tensors(config: &ModelConfig, mut named: Vec<(String, Matrix)>) -> Result<Self> {
        let mut params = Parameters::init(config)?;
        for (name, slot) in params.tensors_mut() {
            let idx = named
                .iter()
                .position(|(n, _)| *n == name)
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor `{name}`")))?;
            let (_, t) = named.swap_remove(idx);
            if t.shape() != slot.shape() {
                return Err(Error::Checkpoint(format!(
                    "tensor `{name}` has shape {:?}, expected {:?}",
                    t.shape(),
                    slot.shape()
                )));
            }
            if !t.is_finite() {
                return Err(Error::NonFinite("checkpoint tensor"));
            }
            *slot = t;
        }
        if let Some((name, _)) = named.first() {
            return Err(Error::Checkpoint(format!("unexpected tensor `{name}`")));
        }
        Ok(params)
    }

    pub fn module_weight(&self, module: ModuleRef) -> Result<&Matrix> {
        let block = self.blocks.get(module.block).ok_or_else(|| {
            Error::Config(format!("module {module} refers to a missing block"))
        })?;
        Ok(match module.slot {
            Slot::MlpIn => &block.mlp_in_w,
            Slot::MlpOut => &block.mlp_out_w,
        })
    }

    fn module_weight_mut(&mut self, module: ModuleRef) -> Result<&mut Matrix> {
        let block = self.blocks.get_mut(module.block).ok_or_else(|| {
            Error::Config(format!("module {module} refers to a missing block"))
        })?;
        Ok(match module.slot {
            Slot::MlpIn => &mut block.mlp_in_w,
            Slot::MlpOut => &mut block.mlp_out_w,
        })
    }

    /// Adds `delta` to one module's weight in place.
    pub fn apply_delta_in_place(&mut self, module: ModuleRef, delta: &Matrix) -> Result<()> {
        let w = self.module_weight_mut(module)?;
        if w.shape() != delta.shape() {
            return Err(Error::Shape(format!(
                "delta {:?} for module {module} with weight {:?}",
                delta.shape(),
                w.shape()
            )));
        }
        if !delta.is_finite() {
            return Err(Error::NonFinite("weight delta"));
        }
        w.add_assign(delta)
    }

    /// Returns a copy with one module's weight shifted by `delta`.
    pub fn apply_delta(&self, module: ModuleRef, delta: &Matrix) -> Result<Self> {
        let mut out = self.clone();
        out.apply_delta_in_place(module, delta)?;
        Ok(out)
    }

    /// `self += scale · other`, tensor by tensor.
    pub fn axpy(&mut self, scale: f64, other: &Parameters) {
        let src = other.tensors();
        for ((_, dst), (_, s)) in self.tensors_mut().into_iter().zip(src) {
            for (a, b) in dst.as_mut_slice().iter_mut().zip(s.as_slice()) {
                *a += scale * b;
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|(_, t)| t.is_finite())
    }
}

fn block_fields(b: &Block) -> [(&'static str, &Matrix); 12] {
    [
        ("ln1_gain", &b.ln1_gain),
        ("ln1_bias", &b.ln1_bias),
        ("w_q", &b.w_q),
        ("w_k", &b.w_k),
        ("w_v", &b.w_v),
        ("w_o", &b.w_o),
        ("ln2_gain", &b.ln2_gain),
        ("ln2_bias", &b.ln2_bias),
        ("mlp_in_w", &b.mlp_in_w),
        ("mlp_in_b", &b.mlp_in_b),
        ("mlp_out_w", &b.mlp_out_w),
        ("mlp_out_b", &b.mlp_out_b),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_is_deterministic_and_seed_sensitive() {
        let cfg = ModelConfig::default();
        let a = Parameters::init(&cfg).unwrap();
        let b = Parameters::init(&cfg).unwrap();
        assert_eq!(a, b);
        let c = Parameters::init(&ModelConfig { seed: 1, ..cfg }).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn parameter_count_matches_hand_count() {
        // vocab 512, embed 64, 2 blocks, hidden 256, seq 64:
        // tok 32768 + pos 4096 + 2·(256 + 16384 + 16640 + 16448) + lnf 128 + head 32768
        let cfg = ModelConfig::default();
        assert_eq!(cfg.parameter_count(), 169_216);
        assert_eq!(Parameters::init(&cfg).unwrap().parameter_count(), 169_216);
    }

    #[test]
    fn invalid_config_rejected() {
        let cfg = ModelConfig {
            mlp_hidden: 0,
            ..ModelConfig::default()
        };
        assert!(matches!(Parameters::init(&cfg), Err(Error::Config(_))));
    }

    #[test]
    fn module_refs_parse_and_print() {
        let mods = parse_module_list("0.mlp_in, 1.mlp_out").unwrap();
        assert_eq!(mods, vec![ModuleRef::new(0, Slot::MlpIn), ModuleRef::new(1, Slot::MlpOut)]);
        assert_eq!(mods[1].to_string(), "1.mlp_out");
        assert!("1.attn".parse::<ModuleRef>().is_err());
        assert!("mlp_in".parse::<ModuleRef>().is_err());
    }

    #[test]
    fn apply_delta_touches_one_tensor() {
        let cfg = ModelConfig {
            vocab_size: 16,
            embed_dim: 8,
            mlp_hidden: 12,
            max_seq_len: 8,
            ..ModelConfig::default()
        };
        let p = Parameters::init(&cfg).unwrap();
        let m = ModuleRef::new(1, Slot::MlpIn);
        let zero = Matrix::zeros(8, 12);
        assert_eq!(p.apply_delta(m, &zero).unwrap(), p);

        let delta = Matrix::from_vec(8, 12, (0..96).map(|i| (i as f64).sin()).collect()).unwrap();
        let q = p.apply_delta(m, &delta).unwrap();
        for ((name, a), (_, b)) in p.tensors().into_iter().zip(q.tensors()) {
            if name == "blocks.1.mlp_in_w" {
                assert_ne!(a, b);
            } else {
                assert_eq!(a.as_slice(), b.as_slice(), "{name} changed");
            }
        }
        let back = q.apply_delta(m, &delta.scale(-1.0)).unwrap();
        let diff = back.module_weight(m).unwrap().sub(p.module_weight(m).unwrap()).unwrap();
        assert!(diff.max_abs() <= 1e-15);

        assert!(matches!(p.apply_delta(m, &Matrix::zeros(12, 8)), Err(Error::Shape(_))));
    }
}
