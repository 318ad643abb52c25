//! Constructive compilation of PCOC instances into positional Transformers.
//!
//! A round becomes one layer over `n = N + 1` rows, the last row being a
//! sink. Row features are the `s` memory positions followed by the row's
//! identifier `i / (N + 1)`. Head `z` routes memory position `z`; its query
//! matrix is a temperature-scaled `±1` pattern, keys are the identity, values
//! are the identity, and `W_O` moves column `z` of head `z` into output column
//! `z`. The local computation is an exact per-row table keyed on the
//! identifier, with pairwise min/max realized by two-layer ReLU networks.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{attention_output, positional_attention_on, Checkpoint, HeadParams, ModelError};
use crate::par::{map_indexed, Execution};
use crate::pcoc::{LocalFn, PcocInstance, Violation};
use crate::tensor::{Tape, Tensor, TensorError};

pub const SIDECAR_SCHEMA: &str = "posattn.compiled.v1";

#[derive(Debug, Error)]
pub enum CompileError {
    #[error("invalid instance: {0}")]
    Invalid(#[from] Violation),
    #[error("round {round}, machine {machine}: local function {local_fn:?} has no exact construction")]
    Unsupported {
        round: usize,
        machine: usize,
        local_fn: LocalFn,
    },
    #[error("pattern is not a unique hardmax: {0}")]
    NotHardmax(String),
    #[error("epsilon must lie in (0, 1), got {0}")]
    Epsilon(f64),
    #[error("expected {expected} inputs, got {got}")]
    InputLength { expected: usize, got: usize },
    #[error("sidecar: {0}")]
    Sidecar(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, CompileError>;

/// `W_K = I`, `W_Q = T(2Ā - 1)` with `T = ½ ln(n/ε)`.
pub fn hardmax_params(pattern: &Tensor, eps: f64) -> Result<(Tensor, Tensor, f64)> {
    if !(eps > 0.0 && eps < 1.0) {
        return Err(CompileError::Epsilon(eps));
    }
    let s = pattern.shape();
    if s.len() != 2 || s[0] != s[1] {
        return Err(CompileError::NotHardmax(format!("shape {s:?} is not square")));
    }
    let n = s[0];
    for (i, row) in pattern.data().chunks(n).enumerate() {
        if row.iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(CompileError::NotHardmax(format!("row {i} is not binary")));
        }
        let ones = row.iter().filter(|&&v| v == 1.0).count();
        if ones != 1 {
            return Err(CompileError::NotHardmax(format!("row {i} has {ones} ones")));
        }
    }
    let t = 0.5 * (n as f64 / eps).ln();
    let wq = pattern.data().iter().map(|&a| t * (2.0 * a - 1.0)).collect();
    Ok((Tensor::new(vec![n, n], wq)?, Tensor::identity(n), t))
}

/// Two-layer ReLU network `y = ReLU(x W1) W2` without biases.
#[derive(Clone, Debug, PartialEq)]
pub struct ReluMlp {
    pub w1: Tensor,
    pub w2: Tensor,
}

impl ReluMlp {
    pub fn eval(&self, x: &[f64]) -> Vec<f64> {
        let (d_in, h) = (self.w1.shape()[0], self.w1.shape()[1]);
        let d_out = self.w2.shape()[1];
        let hidden: Vec<f64> = (0..h)
            .map(|j| (0..d_in).map(|i| x[i] * self.w1.at(i, j)).sum::<f64>().max(0.0))
            .collect();
        (0..d_out)
            .map(|k| (0..h).map(|j| hidden[j] * self.w2.at(j, k)).sum())
            .collect()
    }
}

fn pair_mlp(signs: [f64; 4]) -> ReluMlp {
    // hidden units: x1+x2, -x1-x2, x1-x2, x2-x1
    let w1 = Tensor::new(vec![2, 4], vec![1.0, -1.0, 1.0, -1.0, 1.0, -1.0, -1.0, 1.0]).unwrap();
    let w2 = Tensor::new(vec![4, 1], signs.iter().map(|s| 0.5 * s).collect()).unwrap();
    ReluMlp { w1, w2 }
}

/// `min(x1, x2) = ½(ReLU(x1+x2) − ReLU(−x1−x2) − ReLU(x1−x2) − ReLU(x2−x1))`.
pub fn relu_min_mlp() -> ReluMlp {
    pair_mlp([1.0, -1.0, -1.0, -1.0])
}

/// `max(x1, x2) = ½(ReLU(x1+x2) − ReLU(−x1−x2) + ReLU(x1−x2) + ReLU(x2−x1))`.
pub fn relu_max_mlp() -> ReluMlp {
    pair_mlp([1.0, -1.0, 1.0, 1.0])
}

/// Per round `ℓ` and position `z`, the `(source, destination)` pairs of `H`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RoutingSet {
    pub machines: usize,
    pub mem_size: usize,
    /// `pairs[ℓ - 1][z - 1]`, 1-based machine ids.
    pub pairs: Vec<Vec<Vec<(usize, usize)>>>,
}

impl RoutingSet {
    pub fn from_instance(inst: &PcocInstance) -> Self {
        let mut pairs = vec![vec![Vec::new(); inst.mem_size]; inst.rounds];
        for (l, round) in pairs.iter_mut().enumerate() {
            for j in 1..=inst.machines {
                for rc in inst.rcv(l + 1, j) {
                    for &z in &rc.positions {
                        round[z - 1].push((rc.source, j));
                    }
                }
            }
        }
        RoutingSet {
            machines: inst.machines,
            mem_size: inst.mem_size,
            pairs,
        }
    }

    pub fn sink(&self) -> usize {
        self.machines + 1
    }

    pub fn h(&self, round: usize, z: usize) -> &[(usize, usize)] {
        &self.pairs[round - 1][z - 1]
    }

    /// `H` plus every node that sends nothing at position `z`, routed to the sink.
    pub fn h_hat(&self, round: usize, z: usize) -> Vec<(usize, usize)> {
        let h = self.h(round, z);
        let mut out = h.to_vec();
        for i in 1..=self.sink() {
            if !h.iter().any(|&(src, _)| src == i) {
                out.push((i, self.sink()));
            }
        }
        out
    }

    /// No destination receives position `z` from two sources.
    pub fn unique_sources(&self) -> bool {
        self.pairs.iter().flatten().all(|h| {
            let mut dests: Vec<usize> = h.iter().map(|&(_, j)| j).collect();
            dests.sort_unstable();
            dests.windows(2).all(|w| w[0] != w[1])
        })
    }

    /// Every node appears exactly once as a source in each `Ĥ`.
    pub fn sources_once(&self) -> bool {
        (1..=self.pairs.len()).all(|l| {
            (1..=self.mem_size).all(|z| {
                let hat = self.h_hat(l, z);
                (1..=self.sink()).all(|i| hat.iter().filter(|&&(src, _)| src == i).count() == 1)
            })
        })
    }

    /// Binary `n x n` attention target for head `z`: row `j` selects its
    /// source. Rows that receive nothing select themselves (the table zeroes
    /// unreceived positions) and the sink row selects an unused source, so
    /// the sink column is never chosen.
    pub fn pattern(&self, round: usize, z: usize) -> Tensor {
        let n = self.sink();
        let mut a = Tensor::zeros(&[n, n]);
        let h = self.h(round, z);
        for j in 1..=self.machines {
            let src = h.iter().find(|&&(_, d)| d == j).map_or(j, |&(i, _)| i);
            a.data_mut()[(j - 1) * n + src - 1] = 1.0;
        }
        let spare = (1..=self.machines)
            .find(|&i| !h.iter().any(|&(src, _)| src == i))
            .unwrap_or(1);
        a.data_mut()[(n - 1) * n + spare - 1] = 1.0;
        a
    }
}

/// Local computation of one row in one layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RowRule {
    pub local_fn: LocalFn,
    pub received: Vec<bool>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CompiledLayer {
    pub heads: Vec<HeadParams>,
    pub w_o: Tensor,
    /// One rule per row; the last row is the sink.
    pub table: Vec<RowRule>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CompiledNetwork {
    pub machines: usize,
    pub mem_size: usize,
    pub epsilon: f64,
    pub temperature: f64,
    pub layers: Vec<CompiledLayer>,
}

/// Selects column `z` of head `z` (each head is `s + 1` wide) into output column `z`.
pub fn selection_w_o(s: usize) -> Tensor {
    let d = s + 1;
    let mut w = Tensor::zeros(&[s * d, s]);
    for z in 0..s {
        w.data_mut()[(z * d + z) * s + z] = 1.0;
    }
    w
}

/// Weights and table for round `round` (1-based).
pub fn compile_round(inst: &PcocInstance, round: usize, eps: f64) -> Result<(CompiledLayer, f64)> {
    inst.validate()?;
    let routes = RoutingSet::from_instance(inst);
    let s = inst.mem_size;
    let mut heads = Vec::with_capacity(s);
    let mut temperature = 0.0;
    for z in 1..=s {
        let (w_q, w_k, t) = hardmax_params(&routes.pattern(round, z), eps)?;
        temperature = t;
        heads.push(HeadParams {
            w_q,
            w_k,
            w_v: Tensor::identity(s + 1),
        });
    }
    let mut table = Vec::with_capacity(inst.machines + 1);
    for i in 1..=inst.machines {
        let f = inst.local_fn(round, i);
        if !matches!(
            f,
            LocalFn::Min | LocalFn::Max | LocalFn::Sum | LocalFn::Identity | LocalFn::Zero
        ) {
            return Err(CompileError::Unsupported {
                round,
                machine: i,
                local_fn: f,
            });
        }
        table.push(RowRule {
            local_fn: f,
            received: inst.received_mask(round, i),
        });
    }
    table.push(RowRule {
        local_fn: LocalFn::Zero,
        received: vec![false; s],
    });
    Ok((
        CompiledLayer {
            heads,
            w_o: selection_w_o(s),
            table,
        },
        temperature,
    ))
}

pub fn compile(inst: &PcocInstance, eps: f64) -> Result<CompiledNetwork> {
    if !(eps > 0.0 && eps < 1.0) {
        return Err(CompileError::Epsilon(eps));
    }
    inst.validate()?;
    let mut layers = Vec::with_capacity(inst.rounds);
    for r in 1..=inst.rounds {
        layers.push(compile_round(inst, r, eps)?.0);
    }
    Ok(CompiledNetwork {
        machines: inst.machines,
        mem_size: inst.mem_size,
        epsilon: eps,
        temperature: 0.5 * ((inst.machines + 1) as f64 / eps).ln(),
        layers,
    })
}

/// Exact evaluation of a row rule on the attention output `z` (length `s`).
fn apply_rule(rule: &RowRule, z: &[f64]) -> Vec<f64> {
    let s = z.len();
    let vals: Vec<f64> = z.iter().zip(&rule.received).filter(|(_, &r)| r).map(|(&v, _)| v).collect();
    let masked: Vec<f64> = z
        .iter()
        .zip(&rule.received)
        .map(|(&v, &r)| if r { v } else { 0.0 })
        .collect();
    let pairwise = |mlp: ReluMlp| -> f64 {
        vals.iter()
            .copied()
            .reduce(|a, b| mlp.eval(&[a, b])[0])
            .unwrap_or(0.0)
    };
    match rule.local_fn {
        LocalFn::Identity => masked,
        LocalFn::Min if !vals.is_empty() => vec![pairwise(relu_min_mlp()); s],
        LocalFn::Max if !vals.is_empty() => vec![pairwise(relu_max_mlp()); s],
        LocalFn::Sum if !vals.is_empty() => vec![vals.iter().sum(); s],
        _ => vec![0.0; s],
    }
}

/// Memories (rows `1..=N`, `s` columns each) after every layer, plus the
/// final identifier column of every row including the sink.
#[derive(Clone, Debug, PartialEq)]
pub struct CompiledRun {
    pub memories: Vec<Vec<Vec<f64>>>,
    pub identifiers: Vec<Vec<f64>>,
    pub sink: Vec<Vec<f64>>,
}

impl CompiledNetwork {
    pub fn rows(&self) -> usize {
        self.machines + 1
    }

    pub fn d_x(&self) -> usize {
        self.mem_size + 1
    }

    pub fn identifier(&self, row: usize) -> f64 {
        (row + 1) as f64 / (self.machines + 1) as f64
    }

    /// Row features: input value in every memory position, then the identifier.
    pub fn input_matrix(&self, input: &[f64]) -> Result<Tensor> {
        if input.len() != self.machines {
            return Err(CompileError::InputLength {
                expected: self.machines,
                got: input.len(),
            });
        }
        let (n, d) = (self.rows(), self.d_x());
        let mut x = vec![0.0; n * d];
        for row in 0..n {
            if row < self.machines {
                x[row * d..row * d + self.mem_size].fill(input[row]);
            }
            x[row * d + self.mem_size] = self.identifier(row);
        }
        Ok(Tensor::new(vec![1, n, d], x)?)
    }

    /// Attention matrices `[layer][head]`; computed from weights alone.
    pub fn attention_maps(&self) -> Result<Vec<Vec<Tensor>>> {
        let mut tape = Tape::new();
        let p = tape.constant(Tensor::identity(self.rows()));
        let mut out = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let mut maps = Vec::with_capacity(layer.heads.len());
            for h in &layer.heads {
                let q = tape.constant(h.w_q.clone());
                let k = tape.constant(h.w_k.clone());
                let a = positional_attention_on(&mut tape, p, q, k)?;
                maps.push(tape.value(a).clone());
            }
            out.push(maps);
        }
        Ok(out)
    }

    pub fn forward(&self, input: &[f64]) -> Result<CompiledRun> {
        let (n, d, s) = (self.rows(), self.d_x(), self.mem_size);
        let mut x = self.input_matrix(input)?;
        let mut run = CompiledRun {
            memories: Vec::with_capacity(self.layers.len()),
            identifiers: Vec::with_capacity(self.layers.len()),
            sink: Vec::with_capacity(self.layers.len()),
        };
        for layer in &self.layers {
            let mut tape = Tape::new();
            let p = tape.constant(Tensor::identity(n));
            let xv = tape.constant(x.clone());
            let mut pairs = Vec::with_capacity(layer.heads.len());
            for h in &layer.heads {
                let q = tape.constant(h.w_q.clone());
                let k = tape.constant(h.w_k.clone());
                let v = tape.constant(h.w_v.clone());
                pairs.push((positional_attention_on(&mut tape, p, q, k)?, v));
            }
            let w_o = tape.constant(layer.w_o.clone());
            let z = attention_output(&mut tape, xv, &pairs, w_o)?;
            let z = tape.value(z).data();
            let mut next = vec![0.0; n * d];
            for row in 0..n {
                let mem = apply_rule(&layer.table[row], &z[row * s..(row + 1) * s]);
                next[row * d..row * d + s].copy_from_slice(&mem);
                next[row * d + s] = x.data()[row * d + s];
            }
            x = Tensor::new(vec![1, n, d], next)?;
            let rows: Vec<Vec<f64>> = x.data().chunks(d).map(<[f64]>::to_vec).collect();
            run.memories.push(rows[..self.machines].iter().map(|r| r[..s].to_vec()).collect());
            run.identifiers.push(rows.iter().map(|r| r[s]).collect());
            run.sink.push(rows[n - 1][..s].to_vec());
        }
        Ok(run)
    }

    /// Machine outputs (memory position 1) after the last layer.
    pub fn outputs(&self, input: &[f64]) -> Result<Vec<f64>> {
        let run = self.forward(input)?;
        Ok(match run.memories.last() {
            Some(mem) => mem.iter().map(|m| m[0]).collect(),
            None => input.to_vec(),
        })
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut named = Vec::new();
        for (l, layer) in self.layers.iter().enumerate() {
            for (h, head) in layer.heads.iter().enumerate() {
                named.push((format!("layer.{l}.head.{h}.W_Q"), &head.w_q));
                named.push((format!("layer.{l}.head.{h}.W_K"), &head.w_k));
                named.push((format!("layer.{l}.head.{h}.W_V"), &head.w_v));
            }
            named.push((format!("layer.{l}.W_O"), &layer.w_o));
        }
        let config = serde_json::json!({
            "attention": "positional",
            "rows": self.rows(),
            "num_layers": self.layers.len(),
            "heads": self.mem_size,
            "d_x": self.d_x(),
            "d_v": self.d_x(),
            "d_o": self.mem_size,
        });
        Checkpoint::new(config, named)
    }

    pub fn sidecar(&self, inst: &PcocInstance) -> Sidecar {
        Sidecar {
            schema: SIDECAR_SCHEMA.into(),
            instance: inst.clone(),
            epsilon: self.epsilon,
            temperature: self.temperature,
            tables: self.layers.iter().map(|l| l.table.clone()).collect(),
        }
    }

    /// Writes the weights as a checkpoint and the source instance alongside.
    pub fn save(&self, inst: &PcocInstance, checkpoint: &Path, sidecar: &Path) -> Result<()> {
        self.to_checkpoint().save(checkpoint)?;
        let text = serde_json::to_string_pretty(&self.sidecar(inst))?;
        std::fs::write(sidecar, text)?;
        Ok(())
    }

    /// Restores a network; the weights must equal a fresh compile of the sidecar instance.
    pub fn load(checkpoint: &Path, sidecar: &Path) -> Result<(Self, PcocInstance)> {
        let side: Sidecar = serde_json::from_str(&std::fs::read_to_string(sidecar)?)?;
        if side.schema != SIDECAR_SCHEMA {
            return Err(CompileError::Sidecar(format!("unsupported schema '{}'", side.schema)));
        }
        let ck = Checkpoint::load(checkpoint)?;
        let mut net = compile(&side.instance, side.epsilon)?;
        for (l, layer) in net.layers.iter_mut().enumerate() {
            for (h, head) in layer.heads.iter_mut().enumerate() {
                head.w_q = ck.tensor(&format!("layer.{l}.head.{h}.W_Q"))?;
                head.w_k = ck.tensor(&format!("layer.{l}.head.{h}.W_K"))?;
                head.w_v = ck.tensor(&format!("layer.{l}.head.{h}.W_V"))?;
            }
            layer.w_o = ck.tensor(&format!("layer.{l}.W_O"))?;
            layer.table = side.tables[l].clone();
        }
        Ok((net, side.instance))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sidecar {
    pub schema: String,
    pub instance: PcocInstance,
    pub epsilon: f64,
    pub temperature: f64,
    pub tables: Vec<Vec<RowRule>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VerifyReport {
    pub trials: usize,
    pub epsilon: f64,
    pub tolerance: f64,
    /// Max |network - simulator| over trials, machines and positions, per round.
    pub per_round: Vec<f64>,
    pub final_max: f64,
    pub passed: bool,
}

/// `10³ · ε · s · R`.
pub fn default_tolerance(net: &CompiledNetwork) -> f64 {
    1e3 * net.epsilon * net.mem_size as f64 * net.layers.len() as f64
}

/// Runs network and simulator on `trials` inputs drawn uniformly from `[-2, 2]`.
pub fn verify(
    net: &CompiledNetwork,
    inst: &PcocInstance,
    trials: usize,
    tol: f64,
    seed: u64,
    exec: Execution,
) -> Result<VerifyReport> {
    let rounds = inst.rounds;
    let per_trial: Vec<Result<Vec<f64>>> = map_indexed(exec, trials, |t| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(t as u64);
        let x: Vec<f64> = (0..inst.machines).map(|_| rng.gen_range(-2.0..=2.0)).collect();
        let run = net.forward(&x)?;
        let (_, trace) = inst.run_traced(&x).map_err(|e| match e {
            crate::pcoc::PcocError::Invalid(v) => CompileError::Invalid(v),
            crate::pcoc::PcocError::InputLength { expected, got } => CompileError::InputLength { expected, got },
        })?;
        Ok((0..rounds)
            .map(|r| {
                run.memories[r]
                    .iter()
                    .flatten()
                    .zip(trace.rounds[r].memories.iter().flatten())
                    .map(|(a, b)| (a - b).abs())
                    .fold(0.0, f64::max)
            })
            .collect())
    });
    let mut per_round = vec![0.0f64; rounds];
    for res in per_trial {
        for (acc, d) in per_round.iter_mut().zip(res?) {
            *acc = acc.max(d);
        }
    }
    let final_max = per_round.last().copied().unwrap_or(0.0);
    let worst = per_round.iter().copied().fold(0.0, f64::max);
    Ok(VerifyReport {
        trials,
        epsilon: net.epsilon,
        tolerance: tol,
        per_round,
        final_max,
        passed: worst <= tol,
    })
}
