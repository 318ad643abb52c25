use super::{AttentionKind, LayerVars, ModelConfig, ModelError, ModelParams, ParamVars, Result};
use crate::par::Execution;
use crate::tensor::{Tape, Tensor, Var};

/// Output of [`model_forward`].
#[derive(Clone, Debug)]
pub struct Forward {
    /// `[B, m]` decoded values; the scratchpad row is dropped.
    pub predictions: Var,
    /// `attention[layer][head]`: `[r, r]` for positional attention, `[B, r, r]` otherwise.
    pub attention: Vec<Vec<Var>>,
}

/// `softmax((P W_Q)(P W_K)^T)` on a tape.
pub fn positional_attention_on(tape: &mut Tape, p: Var, w_q: Var, w_k: Var) -> Result<Var> {
    let q = tape.matmul(p, w_q)?;
    let k = tape.matmul(p, w_k)?;
    let kt = tape.transpose(k)?;
    let logits = tape.matmul(q, kt)?;
    Ok(tape.softmax(logits)?)
}

/// Positional attention matrix for fixed encodings `p` (rows are positions).
pub fn positional_attention(p: &Tensor, w_q: &Tensor, w_k: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::new();
    let p = tape.constant(p.clone());
    let q = tape.constant(w_q.clone());
    let k = tape.constant(w_k.clone());
    let a = positional_attention_on(&mut tape, p, q, k)?;
    Ok(tape.value(a).clone())
}

/// `softmax((X W_Q)(X W_K)^T)` for `x [B, r, d]`, optionally rotating queries
/// and keys by their positions.
pub fn self_attention(tape: &mut Tape, x: Var, w_q: Var, w_k: Var, rope: Option<&[usize]>) -> Result<Var> {
    let mut q = tape.matmul(x, w_q)?;
    let mut k = tape.matmul(x, w_k)?;
    if let Some(pos) = rope {
        q = tape.rope(q, pos)?;
        k = tape.rope(k, pos)?;
    }
    let logits = tape.bmm_nt(q, k)?;
    Ok(tape.softmax(logits)?)
}

/// `(⊕_h A_h X W_V^h) W_O` for `x [B, r, d_X]`.
pub fn attention_output(tape: &mut Tape, x: Var, heads: &[(Var, Var)], w_o: Var) -> Result<Var> {
    let mut outs = Vec::with_capacity(heads.len());
    for &(a, w_v) in heads {
        let v = tape.matmul(x, w_v)?;
        outs.push(tape.bmm(a, v)?);
    }
    let cat = if outs.len() == 1 { outs[0] } else { tape.concat(&outs)? };
    Ok(tape.matmul(cat, w_o)?)
}

/// Two-layer ReLU network applied row-wise.
pub fn mlp(tape: &mut Tape, x: Var, layer: &LayerVars) -> Result<Var> {
    let h = tape.matmul(x, layer.w1)?;
    let h = tape.add_bias(h, layer.b1)?;
    let h = tape.relu(h)?;
    let y = tape.matmul(h, layer.w2)?;
    Ok(tape.add_bias(y, layer.b2)?)
}

/// One layer. `p` is the positional matrix restricted to the active rows;
/// `positions` are their indices (used by the rotary variant).
pub fn layer_forward(
    tape: &mut Tape,
    config: &ModelConfig,
    layer: &LayerVars,
    x: Var,
    p: Var,
    positions: &[usize],
) -> Result<(Var, Vec<Var>)> {
    let mut attn = Vec::with_capacity(layer.heads.len());
    for h in &layer.heads {
        let a = match config.attention {
            AttentionKind::Positional => positional_attention_on(tape, p, h.w_q, h.w_k)?,
            AttentionKind::SelfAttention => self_attention(tape, x, h.w_q, h.w_k, None)?,
            AttentionKind::SelfRope => self_attention(tape, x, h.w_q, h.w_k, Some(positions))?,
        };
        attn.push(a);
    }
    let pairs: Vec<(Var, Var)> = attn.iter().zip(&layer.heads).map(|(&a, h)| (a, h.w_v)).collect();
    let o = attention_output(tape, x, &pairs, layer.w_o)?;
    let z = tape.concat(&[o, x])?;
    Ok((mlp(tape, z, layer)?, attn))
}

/// Row indices used by a length-`m` input: `0..m` plus the scratchpad at `n`.
pub(crate) fn active_positions(m: usize, n: usize) -> Vec<usize> {
    (0..m).chain(std::iter::once(n)).collect()
}

fn check_lengths(config: &ModelConfig, inputs: &[Vec<f64>]) -> Result<usize> {
    let m = inputs.first().ok_or(ModelError::Empty)?.len();
    if m == 0 {
        return Err(ModelError::Empty);
    }
    if m > config.max_len {
        return Err(ModelError::TooLong { m, n: config.max_len });
    }
    if inputs.iter().any(|x| x.len() != m) {
        return Err(ModelError::Ragged);
    }
    Ok(m)
}

/// Full forward pass of an equal-length batch.
pub fn model_forward(tape: &mut Tape, params: &ModelParams, vars: &ParamVars, inputs: &[Vec<f64>]) -> Result<Forward> {
    let c = &params.config;
    let m = check_lengths(c, inputs)?;
    let n = c.max_len;
    let r = m + 1;
    let b = inputs.len();
    let positions = active_positions(m, n);

    let mut p_rows = Vec::with_capacity(r * c.d_p);
    for &pos in &positions {
        p_rows.extend_from_slice(&params.positions().data()[pos * c.d_p..(pos + 1) * c.d_p]);
    }
    let p = tape.constant(Tensor::new(vec![r, c.d_p], p_rows)?);

    let d_in = c.d_in();
    let mut raw = vec![0.0; b * r * d_in];
    for (bi, x) in inputs.iter().enumerate() {
        for (row, &pos) in positions.iter().enumerate() {
            let base = (bi * r + row) * d_in;
            raw[base] = if row < m { x[row] } else { 0.0 };
            if c.attention == AttentionKind::SelfAttention {
                raw[base + 1 + pos] = 1.0;
            }
        }
    }
    let x_in = tape.constant(Tensor::new(vec![b, r, d_in], raw)?);
    let mut x = tape.matmul(x_in, vars.encoder)?;

    let mut attention = Vec::with_capacity(vars.layers.len());
    for layer in &vars.layers {
        let (y, a) = layer_forward(tape, c, layer, x, p, &positions)?;
        x = y;
        attention.push(a);
    }
    let x = tape.slice_rows(x, 0, m)?;
    let y = tape.matmul(x, vars.decoder)?;
    let predictions = tape.reshape(y, &[b, m])?;
    Ok(Forward { predictions, attention })
}

impl ModelParams {
    /// Mean squared error over an equal-length batch, with gradients when
    /// `with_grad` (in [`ModelParams::named`] order).
    pub fn loss_and_grads(
        &self,
        inputs: &[Vec<f64>],
        targets: &[Vec<f64>],
        with_grad: bool,
        exec: Execution,
    ) -> Result<(f64, Option<Vec<Vec<f64>>>)> {
        let mut tape = Tape::with_execution(exec);
        let vars = self.record(&mut tape, with_grad);
        let fwd = model_forward(&mut tape, self, &vars, inputs)?;
        let flat: Vec<f64> = targets.iter().flatten().copied().collect();
        let loss = tape.masked_mse(fwd.predictions, &flat, None)?;
        let value = tape.value(loss).data()[0];
        if !with_grad {
            return Ok((value, None));
        }
        tape.backward(loss)?;
        let grads = vars
            .all()
            .into_iter()
            .map(|v| tape.grad(v).expect("parameter leaf").to_vec())
            .collect();
        Ok((value, Some(grads)))
    }

    /// Predictions for sequences of any lengths up to `max_len`.
    pub fn predict(&self, inputs: &[Vec<f64>], exec: Execution) -> Result<Vec<Vec<f64>>> {
        let mut out: Vec<Vec<f64>> = vec![Vec::new(); inputs.len()];
        let mut lengths: Vec<usize> = inputs.iter().map(Vec::len).collect();
        lengths.sort_unstable();
        lengths.dedup();
        for m in lengths {
            let idx: Vec<usize> = (0..inputs.len()).filter(|&i| inputs[i].len() == m).collect();
            let group: Vec<Vec<f64>> = idx.iter().map(|&i| inputs[i].clone()).collect();
            let mut tape = Tape::with_execution(exec);
            let vars = self.record(&mut tape, false);
            let fwd = model_forward(&mut tape, self, &vars, &group)?;
            let pred = tape.value(fwd.predictions).data();
            for (k, &i) in idx.iter().enumerate() {
                out[i] = pred[k * m..(k + 1) * m].to_vec();
            }
        }
        Ok(out)
    }

    /// Attention matrices `[layer][head]`, each `[m+1, m+1]`, for one input.
    pub fn attention_maps(&self, x: &[f64]) -> Result<Vec<Vec<Tensor>>> {
        let mut tape = Tape::new();
        let vars = self.record(&mut tape, false);
        let fwd = model_forward(&mut tape, self, &vars, &[x.to_vec()])?;
        let r = x.len() + 1;
        fwd.attention
            .iter()
            .map(|heads| {
                heads
                    .iter()
                    .map(|&a| Ok(tape.value(a).clone().reshaped(vec![r, r])?))
                    .collect()
            })
            .collect()
    }
}
