//! The editing engine.
//!
//! One call to [`Editor::edit_turn`] applies a batch of edits:
//!
//! 1. extract `z = [h ∥ ∂loss/∂y]` rows for every instance against the current
//!    parameters;
//! 2. fold the turn's moments into each module's [`RunningMoments`];
//! 3. standardize every row with the updated moments and split it back into
//!    `(h̃, ṽ)`;
//! 4. scale: `v = −η·‖h̃‖²·ṽ`;
//! 5. solve `Δ = (HᵀH + I)⁻¹HᵀV` with `H` stacked from the raw `h` rows;
//! 6. add `Δ` to the module weight.
//!
//! All modules are solved before any is applied, so a failed turn leaves the
//! parameters untouched. The only state carried between turns is
//! [`EngineState`], whose size depends on the configuration alone.

use std::collections::BTreeMap;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::EditInstance;
use crate::error::{Error, Result};
use crate::features::{extract_batch, EditFeature};
use crate::linalg::{ridge_residual, ridge_solve, ridge_tolerance, Matrix};
use crate::model::{ModelConfig, ModuleRef, Parameters};
use crate::stats::{batch_moments, RunningMoments, DEFAULT_EPS};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ScalingMode {
    /// `‖h̃‖²`
    #[default]
    NormSquared,
    /// `h · h̃`, raw against normalized input.
    InnerProduct,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Ablation {
    pub normalization: bool,
    /// Fraction of modules whose features are normalized.
    pub norm_coverage: f64,
    pub coverage_seed: u64,
    pub freeze_stats_after_first_turn: bool,
    pub scaling: ScalingMode,
    /// One averaged row per instance instead of one row per label token.
    pub feature_averaging: bool,
}

impl Default for Ablation {
    fn default() -> Self {
        Ablation {
            normalization: true,
            norm_coverage: 1.0,
            coverage_seed: 0,
            freeze_stats_after_first_turn: false,
            scaling: ScalingMode::NormSquared,
            feature_averaging: false,
        }
    }
}

impl Ablation {
    /// Parses a comma list: `no-norm`, `freeze-stats`, `coverage=<f>`,
    /// `scaling=inner|norm`, `average`.
    pub fn parse_into(&mut self, spec: &str) -> Result<()> {
        for item in spec.split(',').map(str::trim).filter(|s| !s.is_empty()) {
            match item.split_once('=') {
                None if item == "no-norm" => self.normalization = false,
                None if item == "freeze-stats" => self.freeze_stats_after_first_turn = true,
                None if item == "average" => self.feature_averaging = true,
                Some(("coverage", v)) => {
                    self.norm_coverage = v
                        .parse()
                        .map_err(|_| Error::Config(format!("bad coverage `{v}`")))?
                }
                Some(("scaling", "inner")) => self.scaling = ScalingMode::InnerProduct,
                Some(("scaling", "norm")) => self.scaling = ScalingMode::NormSquared,
                _ => return Err(Error::Config(format!("unknown ablation `{item}`"))),
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EditorConfig {
    pub eta: f64,
    pub modules: Vec<ModuleRef>,
    #[serde(default = "default_eps")]
    pub eps: f64,
    #[serde(default)]
    pub ablation: Ablation,
}

fn default_eps() -> f64 {
    DEFAULT_EPS
}

impl EditorConfig {
    pub fn new(eta: f64, modules: Vec<ModuleRef>) -> Self {
        EditorConfig {
            eta,
            modules,
            eps: DEFAULT_EPS,
            ablation: Ablation::default(),
        }
    }

    pub fn validate(&self, model: &ModelConfig) -> Result<()> {
        if !self.eta.is_finite() || self.eta < 0.0 {
            return Err(Error::Config(format!("eta must be finite and >= 0, got {}", self.eta)));
        }
        if !(self.eps > 0.0 && self.eps.is_finite()) {
            return Err(Error::Config(format!("eps must be positive, got {}", self.eps)));
        }
        if self.modules.is_empty() {
            return Err(Error::Config("at least one editable module is required".into()));
        }
        for (i, m) in self.modules.iter().enumerate() {
            if m.block >= model.n_blocks {
                return Err(Error::Config(format!("module {m} refers to a missing block")));
            }
            if self.modules[..i].contains(m) {
                return Err(Error::Config(format!("module {m} listed twice")));
            }
        }
        let c = self.ablation.norm_coverage;
        if !(0.0..=1.0).contains(&c) {
            return Err(Error::Config(format!("norm_coverage must lie in [0, 1], got {c}")));
        }
        Ok(())
    }
}

/// Everything the engine carries from one turn to the next.
#[derive(Debug, Clone, PartialEq)]
pub struct EngineState {
    /// Aligned with `EditorConfig::modules`.
    pub moments: Vec<RunningMoments>,
    /// Whether each module's features are normalized (coverage ablation).
    pub normalized: Vec<bool>,
    pub turn_index: u64,
}

impl EngineState {
    pub fn new(cfg: &EditorConfig, model: &ModelConfig) -> Result<Self> {
        cfg.validate(model)?;
        let moments = cfg
            .modules
            .iter()
            .map(|m| {
                let (d, dp) = m.dims(model);
                RunningMoments::new(d + dp, cfg.eps)
            })
            .collect();
        let n = cfg.modules.len();
        let normalized = if !cfg.ablation.normalization {
            vec![false; n]
        } else {
            let k = (cfg.ablation.norm_coverage * n as f64).round() as usize;
            let mut order: Vec<usize> = (0..n).collect();
            order.shuffle(&mut ChaCha8Rng::seed_from_u64(cfg.ablation.coverage_seed));
            let mut flags = vec![false; n];
            for &i in &order[..k.min(n)] {
                flags[i] = true;
            }
            flags
        };
        Ok(EngineState {
            moments,
            normalized,
            turn_index: 0,
        })
    }

    pub fn byte_size(&self) -> usize {
        self.moments.iter().map(RunningMoments::byte_size).sum::<usize>()
            + self.normalized.len()
            + std::mem::size_of::<u64>()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModuleTurnReport {
    pub module: String,
    pub rows: usize,
    pub residual: f64,
    pub tolerance: f64,
    pub delta_norm: f64,
    pub condition_estimate: f64,
    pub flagged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TurnReport {
    pub turn_index: u64,
    pub modules: Vec<ModuleTurnReport>,
    pub wall_time_secs: f64,
    pub state_bytes: usize,
}

/// `−η · s · ṽ` with `s = ‖h̃‖²` or `s = h · h̃`.
pub fn scale_update(
    h_norm: &[f64],
    v_norm: &[f64],
    h_raw: &[f64],
    eta: f64,
    mode: ScalingMode,
) -> Vec<f64> {
    let s: f64 = match mode {
        ScalingMode::NormSquared => h_norm.iter().map(|x| x * x).sum(),
        ScalingMode::InnerProduct => h_raw.iter().zip(h_norm).map(|(a, b)| a * b).sum(),
    };
    let f = -eta * s;
    v_norm.iter().map(|v| f * v).collect()
}

struct PendingDelta {
    module: ModuleRef,
    delta: Matrix,
    report: ModuleTurnReport,
}

#[derive(Debug, Clone)]
pub struct Editor {
    cfg: EditorConfig,
    state: EngineState,
}

/// Output of [`Editor::run_stream`] when a turn fails: the error plus the
/// parameters and reports of the turns that completed.
#[derive(Debug)]
pub struct StreamFailure {
    pub error: Error,
    pub params: Parameters,
    pub reports: Vec<TurnReport>,
}

impl Editor {
    pub fn new(cfg: EditorConfig, model: &ModelConfig) -> Result<Self> {
        let state = EngineState::new(&cfg, model)?;
        Ok(Editor { cfg, state })
    }

    /// Resumes from stored state.
    pub fn with_state(cfg: EditorConfig, model: &ModelConfig, state: EngineState) -> Result<Self> {
        cfg.validate(model)?;
        if state.moments.len() != cfg.modules.len() || state.normalized.len() != cfg.modules.len() {
            return Err(Error::Config("engine state does not match the module list".into()));
        }
        for (m, s) in cfg.modules.iter().zip(&state.moments) {
            let (d, dp) = m.dims(model);
            if s.dim() != d + dp {
                return Err(Error::Config(format!("moments for {m} have dim {}", s.dim())));
            }
        }
        Ok(Editor { cfg, state })
    }

    pub fn config(&self) -> &EditorConfig {
        &self.cfg
    }

    pub fn state(&self) -> &EngineState {
        &self.state
    }

    pub fn into_state(self) -> EngineState {
        self.state
    }

    /// Applies one batch of edits. On error neither the parameters nor the
    /// engine state change.
    pub fn edit_turn(&mut self, params: &Parameters, batch: &[EditInstance]) -> Result<(Parameters, TurnReport)> {
        let turn = self.state.turn_index;
        self.turn_inner(params, batch).map_err(|e| Error::Turn {
            turn: turn as usize,
            source: Box::new(e),
        })
    }

    fn turn_inner(&mut self, params: &Parameters, batch: &[EditInstance]) -> Result<(Parameters, TurnReport)> {
        if batch.is_empty() {
            return Err(Error::EmptyBatch("editing turn"));
        }
        let started = Instant::now();
        let cfg = &self.cfg;
        let features = extract_batch(params, batch, &cfg.modules, cfg.ablation.feature_averaging)?;

        let mut next = self.state.clone();
        let update_stats = !(cfg.ablation.freeze_stats_after_first_turn && next.turn_index >= 1);
        let mut pending = Vec::with_capacity(cfg.modules.len());
        for (i, &module) in cfg.modules.iter().enumerate() {
            let rows: &[EditFeature] = &features[&module];
            if update_stats {
                let zs: Vec<&[f64]> = rows.iter().map(EditFeature::z).collect();
                let (mean, var) = batch_moments(&zs)?;
                next.moments[i].merge_turn(&mean, &var, rows.len() as u64)?;
            }
            pending.push(solve_module(
                module,
                rows,
                &next.moments[i],
                next.normalized[i],
                cfg,
            )?);
        }

        let mut out = params.clone();
        for p in &pending {
            out.apply_delta_in_place(p.module, &p.delta)?;
        }
        next.turn_index += 1;
        self.state = next;
        let report = TurnReport {
            turn_index: turn_index_of(&self.state),
            modules: pending.into_iter().map(|p| p.report).collect(),
            wall_time_secs: started.elapsed().as_secs_f64(),
            state_bytes: self.state.byte_size(),
        };
        Ok((out, report))
    }

    /// Folds [`edit_turn`](Self::edit_turn) over the batches in order.
    pub fn run_stream(
        &mut self,
        params: &Parameters,
        stream: &[Vec<EditInstance>],
    ) -> std::result::Result<(Parameters, Vec<TurnReport>), StreamFailure> {
        let mut current = params.clone();
        let mut reports = Vec::with_capacity(stream.len());
        if stream.is_empty() {
            return Err(StreamFailure {
                error: Error::EmptyBatch("editing stream"),
                params: current,
                reports,
            });
        }
        for batch in stream {
            match self.edit_turn(&current, batch) {
                Ok((p, r)) => {
                    current = p;
                    reports.push(r);
                }
                Err(error) => {
                    return Err(StreamFailure {
                        error,
                        params: current,
                        reports,
                    })
                }
            }
        }
        Ok((current, reports))
    }
}

fn turn_index_of(state: &EngineState) -> u64 {
    state.turn_index - 1
}

fn solve_module(
    module: ModuleRef,
    rows: &[EditFeature],
    moments: &RunningMoments,
    normalize: bool,
    cfg: &EditorConfig,
) -> Result<PendingDelta> {
    let sigma = if normalize { Some(moments.sigma()?) } else { None };
    let d = rows[0].h().len();
    let mut h_rows = Vec::with_capacity(rows.len());
    let mut v_rows = Vec::with_capacity(rows.len());
    for f in rows {
        let z_hat = match &sigma {
            Some(s) => moments.normalize_with(s, f.z())?,
            None => f.z().to_vec(),
        };
        let (h_tilde, v_tilde) = z_hat.split_at(d);
        v_rows.push(scale_update(h_tilde, v_tilde, f.h(), cfg.eta, cfg.ablation.scaling));
        h_rows.push(f.h());
    }
    let h = Matrix::from_rows(&h_rows)?;
    let v = Matrix::from_rows(&v_rows)?;
    let sol = ridge_solve(&h, &v)?;
    let residual = ridge_residual(&h, &v, &sol.delta)?;
    let tolerance = ridge_tolerance(&h, &v);
    Ok(PendingDelta {
        module,
        report: ModuleTurnReport {
            module: module.to_string(),
            rows: rows.len(),
            residual,
            tolerance,
            delta_norm: sol.delta.frobenius_norm(),
            condition_estimate: sol.condition_estimate,
            flagged: residual > tolerance,
        },
        delta: sol.delta,
    })
}

/// Single-turn convenience wrapper over [`Editor::edit_turn`].
pub fn edit_turn(
    params: &Parameters,
    state: &EngineState,
    batch: &[EditInstance],
    cfg: &EditorConfig,
) -> Result<(Parameters, EngineState, TurnReport)> {
    let mut editor = Editor::with_state(cfg.clone(), params.config(), state.clone())?;
    let (p, r) = editor.edit_turn(params, batch)?;
    Ok((p, editor.into_state(), r))
}

/// Per-module summary for inspection tools.
pub fn summarize_state(cfg: &EditorConfig, state: &EngineState) -> BTreeMap<String, (u64, f64, f64)> {
    cfg.modules
        .iter()
        .zip(&state.moments)
        .map(|(m, s)| {
            let mu_norm = s.mu().iter().map(|x| x * x).sum::<f64>().sqrt();
            let mean_sigma = s
                .sigma()
                .map(|sig| sig.iter().sum::<f64>() / sig.len() as f64)
                .unwrap_or(0.0);
            (m.to_string(), (s.count(), mu_norm, mean_sigma))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{EOA, SEP};
    use crate::model::Slot;

    fn setup() -> (Parameters, Vec<Vec<EditInstance>>) {
        let params = Parameters::init(&ModelConfig {
            vocab_size: 24,
            embed_dim: 8,
            n_blocks: 2,
            mlp_hidden: 16,
            max_seq_len: 10,
            seed: 5,
            ..ModelConfig::default()
        })
        .unwrap();
        let inst = |a: usize, b: usize, ans: &[usize]| {
            let mut ans = ans.to_vec();
            ans.push(EOA);
            EditInstance::new(vec![a, b, SEP], ans).unwrap()
        };
        let stream = vec![
            vec![inst(4, 5, &[20]), inst(6, 7, &[21, 22])],
            vec![inst(8, 9, &[23]), inst(10, 11, &[20]), inst(12, 13, &[22])],
            vec![inst(14, 15, &[21])],
        ];
        (params, stream)
    }

    fn cfg(eta: f64) -> EditorConfig {
        EditorConfig::new(
            eta,
            vec![ModuleRef::new(0, Slot::MlpOut), ModuleRef::new(1, Slot::MlpIn)],
        )
    }

    #[test]
    fn scale_update_cases() {
        assert_eq!(
            scale_update(&[1.0, 1.0], &[1.0, -1.0], &[0.0, 0.0], 0.5, ScalingMode::NormSquared),
            vec![-1.0, 1.0]
        );
        assert!(scale_update(&[3.0], &[2.0], &[3.0], 0.0, ScalingMode::NormSquared)
            .iter()
            .all(|&v| v == 0.0));
        let h = [0.3, -1.2, 2.0];
        let v = [1.0, 2.0, -0.5];
        assert_eq!(
            scale_update(&h, &v, &h, 0.7, ScalingMode::InnerProduct),
            scale_update(&h, &v, &h, 0.7, ScalingMode::NormSquared)
        );
    }

    #[test]
    fn zero_eta_is_a_noop_but_counts_advance() {
        let (params, stream) = setup();
        let mut ed = Editor::new(cfg(0.0), params.config()).unwrap();
        let (out, _) = ed.run_stream(&params, &stream).unwrap();
        assert_eq!(out, params);
        // rows: (2 + 3) + (2 + 2 + 2) + 2
        for s in &ed.state().moments {
            assert_eq!(s.count(), 13);
        }
    }

    #[test]
    fn residuals_within_tolerance_and_state_size_constant() {
        let (params, stream) = setup();
        let mut ed = Editor::new(cfg(0.05), params.config()).unwrap();
        let (out, reports) = ed.run_stream(&params, &stream).unwrap();
        assert_ne!(out, params);
        for r in &reports {
            for m in &r.modules {
                assert!(!m.flagged, "{m:?}");
            }
            assert_eq!(r.state_bytes, reports[0].state_bytes);
        }
        assert_eq!(reports.iter().map(|r| r.turn_index).collect::<Vec<_>>(), vec![0, 1, 2]);
    }

    #[test]
    fn single_batch_stream_equals_one_turn() {
        let (params, stream) = setup();
        let c = cfg(0.1);
        let state = EngineState::new(&c, params.config()).unwrap();
        let (p1, s1, _) = edit_turn(&params, &state, &stream[0], &c).unwrap();
        let mut ed = Editor::new(c, params.config()).unwrap();
        let (p2, _) = ed.run_stream(&params, &stream[..1]).unwrap();
        assert_eq!(p1, p2);
        assert_eq!(&s1, ed.state());
    }

    #[test]
    fn frozen_stats_stop_after_first_turn() {
        let (params, stream) = setup();
        let mut c = cfg(0.1);
        c.ablation.freeze_stats_after_first_turn = true;
        let mut ed = Editor::new(c, params.config()).unwrap();
        ed.run_stream(&params, &stream).unwrap();
        assert_eq!(ed.state().moments[0].count(), 5);
        assert_eq!(ed.state().turn_index, 3);
    }

    #[test]
    fn coverage_selects_a_fixed_subset() {
        let params = setup().0;
        let mut c = EditorConfig::new(0.1, ModuleRef::all(params.config()));
        c.ablation.norm_coverage = 0.5;
        let s = EngineState::new(&c, params.config()).unwrap();
        assert_eq!(s.normalized.iter().filter(|&&b| b).count(), 2);
        c.ablation.normalization = false;
        let s = EngineState::new(&c, params.config()).unwrap();
        assert!(s.normalized.iter().all(|&b| !b));
    }

    #[test]
    fn failed_turn_changes_nothing() {
        let (params, stream) = setup();
        let mut ed = Editor::new(cfg(0.1), params.config()).unwrap();
        ed.edit_turn(&params, &stream[0]).unwrap();
        let before = ed.state().clone();
        let bad = vec![EditInstance::new(vec![99, SEP], vec![4, EOA]).unwrap()];
        assert!(ed.edit_turn(&params, &bad).is_err());
        assert_eq!(ed.state(), &before);
        assert!(matches!(ed.edit_turn(&params, &[]), Err(Error::Turn { .. })));
    }

    #[test]
    fn config_validation() {
        let m = setup().0.config().clone();
        let dup = EditorConfig::new(1.0, vec![ModuleRef::new(0, Slot::MlpIn); 2]);
        assert!(dup.validate(&m).is_err());
        assert!(EditorConfig::new(1.0, vec![]).validate(&m).is_err());
        assert!(EditorConfig::new(1.0, vec![ModuleRef::new(5, Slot::MlpIn)]).validate(&m).is_err());
        let mut c = cfg(1.0);
        c.ablation.norm_coverage = 1.5;
        assert!(c.validate(&m).is_err());
    }

    #[test]
    fn ablation_flags_parse() {
        let mut a = Ablation::default();
        a.parse_into("no-norm, freeze-stats,coverage=0.25,scaling=inner").unwrap();
        assert!(!a.normalization && a.freeze_stats_after_first_turn);
        assert_eq!(a.norm_coverage, 0.25);
        assert_eq!(a.scaling, ScalingMode::InnerProduct);
        assert!(a.parse_into("bogus").is_err());
    }
}
