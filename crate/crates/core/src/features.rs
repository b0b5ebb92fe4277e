//! Joint editing features `z = [h ∥ ∂loss/∂y]` at answer positions.
//!
//! For a label token at position `t` the prediction comes from position
//! `t − 1`, so that is where `h` (module input) and the output gradient are
//! read.

use std::collections::BTreeMap;

use crate::data::EditInstance;
use crate::error::{Error, Result};
use crate::model::{ModuleRef, Parameters};

#[derive(Debug, Clone, PartialEq)]
pub struct EditFeature {
    pub module: ModuleRef,
    /// Sequence position the features were read at.
    pub position: usize,
    z: Vec<f64>,
    input_dim: usize,
}

impl EditFeature {
    pub fn new(module: ModuleRef, position: usize, h: &[f64], grad_y: &[f64]) -> Self {
        let mut z = Vec::with_capacity(h.len() + grad_y.len());
        z.extend_from_slice(h);
        z.extend_from_slice(grad_y);
        EditFeature {
            module,
            position,
            z,
            input_dim: h.len(),
        }
    }

    /// Unnormalized module input.
    pub fn h(&self) -> &[f64] {
        &self.z[..self.input_dim]
    }

    /// Gradient of the instance loss with respect to the module output.
    pub fn grad_y(&self) -> &[f64] {
        &self.z[self.input_dim..]
    }

    pub fn z(&self) -> &[f64] {
        &self.z
    }
}

/// One forward and one backward pass over `instance`; returns one feature per
/// (module, label position), grouped by module in the order of `modules`.
pub fn extract(
    params: &Parameters,
    instance: &EditInstance,
    modules: &[ModuleRef],
) -> Result<Vec<EditFeature>> {
    if modules.is_empty() {
        return Err(Error::Config("no editable modules given".into()));
    }
    let tokens = instance.tokens();
    let mask = instance.label_mask();
    let back = params.loss_and_backward(&tokens, &mask, modules)?;
    let positions: Vec<usize> = (1..tokens.len()).filter(|&t| mask[t]).map(|t| t - 1).collect();
    let mut out = Vec::with_capacity(modules.len() * positions.len());
    for &m in modules {
        let inputs = &back.trace.inputs[&m];
        let grads = &back.tap_grads[&m];
        for &p in &positions {
            out.push(EditFeature::new(m, p, inputs.row(p), grads.row(p)));
        }
    }
    Ok(out)
}

/// Features of a whole turn, per module, in batch order. With `average`, each
/// instance contributes the mean of its label-position rows instead.
pub fn extract_batch(
    params: &Parameters,
    batch: &[EditInstance],
    modules: &[ModuleRef],
    average: bool,
) -> Result<BTreeMap<ModuleRef, Vec<EditFeature>>> {
    let mut per_module: BTreeMap<ModuleRef, Vec<EditFeature>> =
        modules.iter().map(|&m| (m, Vec::new())).collect();
    for inst in batch {
        let feats = extract(params, inst, modules)?;
        if average {
            for &m in modules {
                let rows: Vec<&EditFeature> = feats.iter().filter(|f| f.module == m).collect();
                let n = rows.len() as f64;
                let mut z = vec![0.0; rows[0].z.len()];
                for f in &rows {
                    for (a, b) in z.iter_mut().zip(&f.z) {
                        *a += b;
                    }
                }
                z.iter_mut().for_each(|v| *v /= n);
                let d = rows[0].input_dim;
                per_module
                    .get_mut(&m)
                    .expect("initialized above")
                    .push(EditFeature::new(m, rows[0].position, &z[..d], &z[d..]));
            }
        } else {
            for f in feats {
                per_module.get_mut(&f.module).expect("initialized above").push(f);
            }
        }
    }
    Ok(per_module)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{EditInstance, EOA, SEP};
    use crate::model::{ModelConfig, OutputShift, Slot};

    fn tiny() -> Parameters {
        Parameters::init(&ModelConfig {
            vocab_size: 20,
            embed_dim: 8,
            n_blocks: 2,
            mlp_hidden: 12,
            max_seq_len: 12,
            seed: 3,
            ..ModelConfig::default()
        })
        .unwrap()
    }

    fn instance(prompt: &[usize], answer: &[usize]) -> EditInstance {
        let mut p = prompt.to_vec();
        p.push(SEP);
        let mut a = answer.to_vec();
        a.push(EOA);
        EditInstance::new(p, a).unwrap()
    }

    #[test]
    fn counts_and_dims() {
        let params = tiny();
        let mods = [ModuleRef::new(0, Slot::MlpIn), ModuleRef::new(1, Slot::MlpOut)];
        let feats = extract(&params, &instance(&[5, 6, 7], &[9]), &mods).unwrap();
        assert_eq!(feats.len(), 4);
        for f in &feats {
            let (d, dp) = f.module.dims(params.config());
            assert_eq!(f.z().len(), d + dp);
            assert_eq!(&f.z()[..d], f.h());
            assert_eq!(&f.z()[d..], f.grad_y());
        }
        assert_eq!(feats[0].position, 3);
        assert_eq!(feats[1].position, 4);
    }

    #[test]
    fn h_matches_trace_and_params_unchanged() {
        let params = tiny();
        let before = params.clone();
        let inst = instance(&[4, 8], &[10, 11]);
        let m = ModuleRef::new(1, Slot::MlpIn);
        let feats = extract(&params, &inst, &[m]).unwrap();
        assert_eq!(params, before);
        let trace = params.forward(&inst.tokens(), &[m]).unwrap();
        for f in feats {
            assert_eq!(f.h(), trace.inputs[&m].row(f.position));
        }
    }

    #[test]
    fn independent_of_batch_order() {
        let params = tiny();
        let mods = ModuleRef::all(params.config());
        let a = instance(&[4, 5], &[12]);
        let b = instance(&[7, 6, 5], &[13, 14]);
        let ab = extract_batch(&params, &[a.clone(), b.clone()], &mods, false).unwrap();
        let ba = extract_batch(&params, &[b, a], &mods, false).unwrap();
        for m in &mods {
            let (x, y) = (&ab[m], &ba[m]);
            assert_eq!(x.len(), 5);
            assert_eq!(x[..2], y[3..]);
            assert_eq!(x[2..], y[..3]);
        }
        let avg = extract_batch(&params, &[instance(&[4, 5], &[12, 13])], &mods, true).unwrap();
        assert_eq!(avg[&mods[0]].len(), 1);
    }

    #[test]
    fn grad_y_matches_finite_differences() {
        let params = tiny();
        let inst = instance(&[4, 8, 15], &[10, 11]);
        let (tokens, mask) = (inst.tokens(), inst.label_mask());
        let mods = ModuleRef::all(params.config());
        let feats = extract(&params, &inst, &mods).unwrap();
        let step = 1e-5;
        for f in &feats {
            for (c, &g) in f.grad_y().iter().enumerate() {
                let mut shift = vec![0.0; f.grad_y().len()];
                shift[c] = step;
                let plus = OutputShift { module: f.module, position: f.position, values: shift.clone() };
                shift[c] = -step;
                let minus = OutputShift { module: f.module, position: f.position, values: shift };
                let fd = (params.loss_shifted(&tokens, &mask, &[plus]).unwrap()
                    - params.loss_shifted(&tokens, &mask, &[minus]).unwrap())
                    / (2.0 * step);
                let rel = (fd - g).abs() / fd.abs().max(g.abs()).max(1e-6);
                assert!(rel <= 1e-4, "{} pos {} coord {c}: {g} vs {fd}", f.module, f.position);
            }
        }
    }
}
