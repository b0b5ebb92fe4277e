use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::linalg::{dot, matmul, matmul_nt, matmul_tn, Matrix};

use super::{LossReduction, ModuleRef, Parameters, Slot};

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// Activations recorded during a forward pass.
///
/// `inputs[m]` row `t` is the input of module `m` at position `t`;
/// `outputs[m]` the corresponding pre-residual / pre-activation output.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardTrace {
    pub logits: Matrix,
    pub inputs: BTreeMap<ModuleRef, Matrix>,
    pub outputs: BTreeMap<ModuleRef, Matrix>,
}

/// An additive offset injected into one module output at one position.
/// Used to probe `∂loss/∂output` by finite differences.
#[derive(Debug, Clone)]
pub struct OutputShift {
    pub module: ModuleRef,
    pub position: usize,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct Backward {
    pub loss: f64,
    pub param_grads: Parameters,
    /// `tap_grads[m]` row `t` is `∂loss/∂(output of m at t)`.
    pub tap_grads: BTreeMap<ModuleRef, Matrix>,
    pub trace: ForwardTrace,
}

struct LnCache {
    xhat: Matrix,
    rstd: Vec<f64>,
}

struct BlockCache {
    ln1: LnCache,
    a: Matrix,
    q: Matrix,
    k: Matrix,
    v: Matrix,
    probs: Matrix,
    o: Matrix,
    ln2: LnCache,
    m: Matrix,
    u: Matrix,
    g: Matrix,
}

struct Cache {
    blocks: Vec<BlockCache>,
    lnf: LnCache,
    f: Matrix,
    logits: Matrix,
}

fn layer_norm(x: &Matrix, gain: &Matrix, bias: &Matrix) -> (Matrix, LnCache) {
    let (t, d) = x.shape();
    let mut y = Matrix::zeros(t, d);
    let mut xhat = Matrix::zeros(t, d);
    let mut rstd = Vec::with_capacity(t);
    let (g, b) = (gain.as_slice(), bias.as_slice());
    for r in 0..t {
        let row = x.row(r);
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let rs = 1.0 / (var + LN_EPS).sqrt();
        rstd.push(rs);
        let (xh, yr) = (xhat.row_mut(r), &mut y.as_mut_slice()[r * d..(r + 1) * d]);
        for i in 0..d {
            xh[i] = (row[i] - mean) * rs;
            yr[i] = xh[i] * g[i] + b[i];
        }
    }
    (y, LnCache { xhat, rstd })
}

/// Returns `∂L/∂x` and accumulates gain/bias gradients.
fn layer_norm_backward(
    dy: &Matrix,
    cache: &LnCache,
    gain: &Matrix,
    d_gain: &mut Matrix,
    d_bias: &mut Matrix,
) -> Matrix {
    let (t, d) = dy.shape();
    let mut dx = Matrix::zeros(t, d);
    let g = gain.as_slice();
    let mut dxhat = vec![0.0; d];
    for r in 0..t {
        let dyr = dy.row(r);
        let xh = cache.xhat.row(r);
        {
            let (dg, db) = (d_gain.as_mut_slice(), d_bias.as_mut_slice());
            for i in 0..d {
                dg[i] += dyr[i] * xh[i];
                db[i] += dyr[i];
                dxhat[i] = dyr[i] * g[i];
            }
        }
        let mean_dxhat = dxhat.iter().sum::<f64>() / d as f64;
        let mean_dxhat_xhat = dot(&dxhat, xh) / d as f64;
        let rs = cache.rstd[r];
        let out = dx.row_mut(r);
        for i in 0..d {
            out[i] = rs * (dxhat[i] - mean_dxhat - xh[i] * mean_dxhat_xhat);
        }
    }
    dx
}

#[inline]
fn gelu(u: f64) -> f64 {
    0.5 * u * (1.0 + (GELU_C * (u + GELU_A * u * u * u)).tanh())
}

#[inline]
fn gelu_grad(u: f64) -> f64 {
    let th = (GELU_C * (u + GELU_A * u * u * u)).tanh();
    0.5 * (1.0 + th) + 0.5 * u * (1.0 - th * th) * GELU_C * (1.0 + 3.0 * GELU_A * u * u)
}

fn add_bias(m: &mut Matrix, bias: &Matrix) {
    let cols = m.cols();
    let b = bias.as_slice();
    for r in 0..m.rows() {
        let row = &mut m.as_mut_slice()[r * cols..(r + 1) * cols];
        for (x, &bb) in row.iter_mut().zip(b) {
            *x += bb;
        }
    }
}

fn add_column_sums(acc: &mut Matrix, m: &Matrix) {
    let a = acc.as_mut_slice();
    for r in 0..m.rows() {
        for (x, &v) in a.iter_mut().zip(m.row(r)) {
            *x += v;
        }
    }
}

fn apply_shifts(out: &mut Matrix, module: ModuleRef, shifts: &[OutputShift]) -> Result<()> {
    for s in shifts.iter().filter(|s| s.module == module) {
        if s.position >= out.rows() || s.values.len() != out.cols() {
            return Err(Error::Shape(format!(
                "shift for {module} at position {} with {} values",
                s.position,
                s.values.len()
            )));
        }
        for (x, v) in out.row_mut(s.position).iter_mut().zip(&s.values) {
            *x += v;
        }
    }
    Ok(())
}

/// Log-softmax cross-entropy of one logits row against `target`, and the
/// row's softmax.
fn cross_entropy(row: &[f64], target: usize) -> (f64, Vec<f64>) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut probs: Vec<f64> = row.iter().map(|&l| (l - max).exp()).collect();
    let z: f64 = probs.iter().sum();
    probs.iter_mut().for_each(|p| *p /= z);
    let loss = z.ln() + max - row[target];
    (loss, probs)
}

impl Parameters {
    pub(crate) fn check_tokens(&self, tokens: &[usize]) -> Result<()> {
        let cfg = self.config();
        if tokens.is_empty() {
            return Err(Error::Length { len: 0, max: cfg.max_seq_len });
        }
        if tokens.len() > cfg.max_seq_len {
            return Err(Error::Length {
                len: tokens.len(),
                max: cfg.max_seq_len,
            });
        }
        if let Some(&token) = tokens.iter().find(|&&t| t >= cfg.vocab_size) {
            return Err(Error::Vocabulary {
                token,
                vocab_size: cfg.vocab_size,
            });
        }
        Ok(())
    }

    fn check_taps(&self, taps: &[ModuleRef]) -> Result<()> {
        for m in taps {
            if m.block >= self.blocks.len() {
                return Err(Error::Config(format!("module {m} refers to a missing block")));
            }
        }
        Ok(())
    }

    fn run(
        &self,
        tokens: &[usize],
        taps: &[ModuleRef],
        shifts: &[OutputShift],
    ) -> Result<(Cache, ForwardTrace)> {
        self.check_tokens(tokens)?;
        self.check_taps(taps)?;
        let d = self.config().embed_dim;
        let t = tokens.len();
        let scale = 1.0 / (d as f64).sqrt();

        let mut x = Matrix::zeros(t, d);
        for (p, &tok) in tokens.iter().enumerate() {
            let (e, pe) = (self.tok_emb.row(tok), self.pos_emb.row(p));
            for (i, xi) in x.row_mut(p).iter_mut().enumerate() {
                *xi = e[i] + pe[i];
            }
        }

        let mut inputs = BTreeMap::new();
        let mut outputs = BTreeMap::new();
        let mut caches = Vec::with_capacity(self.blocks.len());
        for (bi, blk) in self.blocks.iter().enumerate() {
            let (a, ln1) = layer_norm(&x, &blk.ln1_gain, &blk.ln1_bias);
            let q = matmul(&a, &blk.w_q)?;
            let k = matmul(&a, &blk.w_k)?;
            let v = matmul(&a, &blk.w_v)?;
            let mut probs = Matrix::zeros(t, t);
            for i in 0..t {
                let qi = q.row(i);
                let row = probs.row_mut(i);
                let mut max = f64::NEG_INFINITY;
                for j in 0..=i {
                    row[j] = dot(qi, k.row(j)) * scale;
                    max = max.max(row[j]);
                }
                let mut z = 0.0;
                for p in row.iter_mut().take(i + 1) {
                    *p = (*p - max).exp();
                    z += *p;
                }
                for p in row.iter_mut().take(i + 1) {
                    *p /= z;
                }
            }
            let o = matmul(&probs, &v)?;
            let att = matmul(&o, &blk.w_o)?;
            x.add_assign(&att)?;

            let (m, ln2) = layer_norm(&x, &blk.ln2_gain, &blk.ln2_bias);
            let mut u = matmul(&m, &blk.mlp_in_w)?;
            add_bias(&mut u, &blk.mlp_in_b);
            let mod_in = ModuleRef::new(bi, Slot::MlpIn);
            apply_shifts(&mut u, mod_in, shifts)?;
            let g = Matrix::from_vec(t, u.cols(), u.as_slice().iter().map(|&v| gelu(v)).collect())?;
            let mut w = matmul(&g, &blk.mlp_out_w)?;
            add_bias(&mut w, &blk.mlp_out_b);
            let mod_out = ModuleRef::new(bi, Slot::MlpOut);
            apply_shifts(&mut w, mod_out, shifts)?;
            x.add_assign(&w)?;

            if taps.contains(&mod_in) {
                inputs.insert(mod_in, m.clone());
                outputs.insert(mod_in, u.clone());
            }
            if taps.contains(&mod_out) {
                inputs.insert(mod_out, g.clone());
                outputs.insert(mod_out, w.clone());
            }
            caches.push(BlockCache {
                ln1,
                a,
                q,
                k,
                v,
                probs,
                o,
                ln2,
                m,
                u,
                g,
            });
        }
        let (f, lnf) = layer_norm(&x, &self.lnf_gain, &self.lnf_bias);
        let logits = matmul(&f, &self.head)?;
        if !logits.is_finite() {
            return Err(Error::NonFinite("logits"));
        }
        let trace = ForwardTrace {
            logits: logits.clone(),
            inputs,
            outputs,
        };
        Ok((
            Cache {
                blocks: caches,
                lnf,
                f,
                logits,
            },
            trace,
        ))
    }

    /// Causal forward pass recording the inputs and outputs of `taps`.
    pub fn forward(&self, tokens: &[usize], taps: &[ModuleRef]) -> Result<ForwardTrace> {
        self.run(tokens, taps, &[]).map(|(_, trace)| trace)
    }

    pub fn forward_shifted(
        &self,
        tokens: &[usize],
        taps: &[ModuleRef],
        shifts: &[OutputShift],
    ) -> Result<ForwardTrace> {
        self.run(tokens, taps, shifts).map(|(_, trace)| trace)
    }

    /// Teacher-forced loss. `label_mask[t]` marks token `t` as a target,
    /// predicted from the logits at position `t − 1`.
    pub fn loss(&self, tokens: &[usize], label_mask: &[bool]) -> Result<f64> {
        self.loss_shifted(tokens, label_mask, &[])
    }

    pub fn loss_shifted(
        &self,
        tokens: &[usize],
        label_mask: &[bool],
        shifts: &[OutputShift],
    ) -> Result<f64> {
        let labels = self.label_positions(tokens, label_mask)?;
        let (cache, _) = self.run(tokens, &[], shifts)?;
        let mut loss = 0.0;
        for &t in &labels {
            loss += cross_entropy(cache.logits.row(t - 1), tokens[t]).0;
        }
        Ok(self.reduce(loss, labels.len()))
    }

    fn reduce(&self, loss: f64, n: usize) -> f64 {
        match self.config().loss {
            LossReduction::Sum => loss,
            LossReduction::Mean => loss / n as f64,
        }
    }

    fn label_positions(&self, tokens: &[usize], label_mask: &[bool]) -> Result<Vec<usize>> {
        if label_mask.len() != tokens.len() {
            return Err(Error::Shape(format!(
                "label mask has {} entries for {} tokens",
                label_mask.len(),
                tokens.len()
            )));
        }
        if label_mask.first() == Some(&true) {
            return Err(Error::Shape("position 0 has no preceding context to predict it".into()));
        }
        let labels: Vec<usize> = (0..tokens.len()).filter(|&t| label_mask[t]).collect();
        if labels.is_empty() {
            return Err(Error::NoLabels);
        }
        Ok(labels)
    }

    /// Loss, exact parameter gradients and module-output gradients.
    pub fn loss_and_backward(
        &self,
        tokens: &[usize],
        label_mask: &[bool],
        taps: &[ModuleRef],
    ) -> Result<Backward> {
        let mut grads = self.zeros_like();
        let (loss, tap_grads, trace) = self.accumulate_grads(tokens, label_mask, taps, &mut grads)?;
        Ok(Backward {
            loss,
            param_grads: grads,
            tap_grads,
            trace,
        })
    }

    /// Adds this sequence's parameter gradients into `grads` and returns the
    /// loss, the tap gradients and the forward trace.
    pub fn accumulate_grads(
        &self,
        tokens: &[usize],
        label_mask: &[bool],
        taps: &[ModuleRef],
        grads: &mut Parameters,
    ) -> Result<(f64, BTreeMap<ModuleRef, Matrix>, ForwardTrace)> {
        let labels = self.label_positions(tokens, label_mask)?;
        let (cache, trace) = self.run(tokens, taps, &[])?;
        let t = tokens.len();
        let d = self.config().embed_dim;
        let vocab = self.config().vocab_size;
        let weight = match self.config().loss {
            LossReduction::Sum => 1.0,
            LossReduction::Mean => 1.0 / labels.len() as f64,
        };

        let mut loss = 0.0;
        let mut dlogits = Matrix::zeros(t, vocab);
        for &p in &labels {
            let (l, probs) = cross_entropy(cache.logits.row(p - 1), tokens[p]);
            loss += l;
            let row = dlogits.row_mut(p - 1);
            for (g, pr) in row.iter_mut().zip(probs) {
                *g += weight * pr;
            }
            row[tokens[p]] -= weight;
        }
        let loss = self.reduce(loss, labels.len());

        grads.head.add_assign(&matmul_tn(&cache.f, &dlogits)?)?;
        let df = matmul_nt(&dlogits, &self.head)?;
        let mut dx = layer_norm_backward(
            &df,
            &cache.lnf,
            &self.lnf_gain,
            &mut grads.lnf_gain,
            &mut grads.lnf_bias,
        );

        let scale = 1.0 / (d as f64).sqrt();
        let mut tap_grads = BTreeMap::new();
        for bi in (0..self.blocks.len()).rev() {
            let blk = &self.blocks[bi];
            let c = &cache.blocks[bi];
            let gb = &mut grads.blocks[bi];

            // MLP branch: x += mlp_out(gelu(mlp_in(ln2(x))))
            let dw = &dx;
            let mod_out = ModuleRef::new(bi, Slot::MlpOut);
            if taps.contains(&mod_out) {
                tap_grads.insert(mod_out, dw.clone());
            }
            add_column_sums(&mut gb.mlp_out_b, dw);
            gb.mlp_out_w.add_assign(&matmul_tn(&c.g, dw)?)?;
            let dg = matmul_nt(dw, &blk.mlp_out_w)?;
            let du_data = dg
                .as_slice()
                .iter()
                .zip(c.u.as_slice())
                .map(|(&g, &u)| g * gelu_grad(u))
                .collect();
            let du = Matrix::from_vec(t, dg.cols(), du_data)?;
            let mod_in = ModuleRef::new(bi, Slot::MlpIn);
            if taps.contains(&mod_in) {
                tap_grads.insert(mod_in, du.clone());
            }
            add_column_sums(&mut gb.mlp_in_b, &du);
            gb.mlp_in_w.add_assign(&matmul_tn(&c.m, &du)?)?;
            let dm = matmul_nt(&du, &blk.mlp_in_w)?;
            let dx_ln2 =
                layer_norm_backward(&dm, &c.ln2, &blk.ln2_gain, &mut gb.ln2_gain, &mut gb.ln2_bias);
            dx.add_assign(&dx_ln2)?;

            // Attention branch: x += (softmax(q kᵀ / √d) v) W_o
            gb.w_o.add_assign(&matmul_tn(&c.o, &dx)?)?;
            let d_o = matmul_nt(&dx, &blk.w_o)?;
            let d_probs = matmul_nt(&d_o, &c.v)?;
            let dv = matmul_tn(&c.probs, &d_o)?;
            let mut d_scores = Matrix::zeros(t, t);
            for i in 0..t {
                let p = c.probs.row(i);
                let dp = d_probs.row(i);
                let inner: f64 = (0..=i).map(|j| p[j] * dp[j]).sum();
                let ds = d_scores.row_mut(i);
                for j in 0..=i {
                    ds[j] = p[j] * (dp[j] - inner) * scale;
                }
            }
            let dq = matmul(&d_scores, &c.k)?;
            let dk = matmul_tn(&d_scores, &c.q)?;
            gb.w_q.add_assign(&matmul_tn(&c.a, &dq)?)?;
            gb.w_k.add_assign(&matmul_tn(&c.a, &dk)?)?;
            gb.w_v.add_assign(&matmul_tn(&c.a, &dv)?)?;
            let mut da = matmul_nt(&dq, &blk.w_q)?;
            da.add_assign(&matmul_nt(&dk, &blk.w_k)?)?;
            da.add_assign(&matmul_nt(&dv, &blk.w_v)?)?;
            let dx_ln1 =
                layer_norm_backward(&da, &c.ln1, &blk.ln1_gain, &mut gb.ln1_gain, &mut gb.ln1_bias);
            dx.add_assign(&dx_ln1)?;
        }

        for (p, &tok) in tokens.iter().enumerate() {
            let src = dx.row(p);
            for (g, &s) in grads.tok_emb.row_mut(tok).iter_mut().zip(src) {
                *g += s;
            }
            for (g, &s) in grads.pos_emb.row_mut(p).iter_mut().zip(src) {
                *g += s;
            }
        }
        Ok((loss, tap_grads, trace))
    }
}

/// Row-wise softmax of a logits matrix.
pub fn softmax_rows(logits: &Matrix) -> Matrix {
    let mut out = logits.clone();
    for r in 0..out.rows() {
        let row = out.row_mut(r);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            z += *v;
        }
        row.iter_mut().for_each(|v| *v /= z);
    }
    out
}

/// Index of the largest entry, lowest index on ties.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}
