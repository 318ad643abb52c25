//! How often an OOD test list still falls inside the training domain, and
//! attention dumps across input scales.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::compiler::CompiledNetwork;
use crate::model::{ModelError, ModelParams};
use crate::par::Execution;
use crate::tasks::{in_domain_fraction, sample_test_ood_with, LengthMode, TaskError, TaskKind, TRAIN_BOUND};

#[derive(Debug, Error)]
pub enum OodError {
    #[error("invalid parameters: {0}")]
    Param(String),
    #[error(transparent)]
    Task(#[from] TaskError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Compile(#[from] crate::compiler::CompileError),
}

pub type Result<T> = std::result::Result<T, OodError>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Branch {
    /// `n >= 3`.
    General,
    /// `n = 2`.
    Pair,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OverlapBound {
    pub n: usize,
    pub c: f64,
    pub p_in_upper: f64,
    pub branch: Branch,
}

/// Closed-form upper bound on the probability that every entry of an OOD
/// test list lies in the training range.
pub fn p_in_bound(n: usize, c: f64) -> Result<OverlapBound> {
    if n < 2 || !(c > 1.0) || !c.is_finite() {
        return Err(OodError::Param(format!("need n >= 2 and c > 1, got n={n}, c={c}")));
    }
    let c2 = c * c - 1.0;
    let (p, branch) = if n == 2 {
        ((3.0 * (1.0 - 1.0 / c) + 9.0 / 8.0) / (2.0 * c2), Branch::Pair)
    } else {
        let nf = n as f64;
        let a = (3.0 * (1.0 - c.powi(-(n as i32 - 1))) + 1.0) / (2.0 * c2 * (nf - 1.0));
        let k = n as i32 - 2;
        let b = (2.0 - 4.0 * (2.0 / (1.0 + c)).powi(k) + 2.0 * (1.0 / c).powi(k)) / ((nf - 1.0) * (nf - 2.0) * c2);
        (a + b, Branch::General)
    };
    Ok(OverlapBound {
        n,
        c,
        p_in_upper: p.clamp(0.0, 1.0),
        branch,
    })
}

/// Additive Chernoff tail `exp(-2 N ε²)` for `P(N_in >= N(p + ε))`.
pub fn chernoff_tail(samples: usize, p: f64, eps: f64) -> Result<f64> {
    if samples == 0 || !(0.0..=1.0).contains(&p) || !(eps > 0.0) {
        return Err(OodError::Param(format!("need N >= 1, p in [0,1], eps > 0; got N={samples}, p={p}, eps={eps}")));
    }
    Ok((-2.0 * samples as f64 * eps * eps).exp())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MonteCarloEstimate {
    pub n: usize,
    pub c: f64,
    pub trials: usize,
    pub estimate: f64,
    /// Three binomial standard errors.
    pub half_width: f64,
}

impl MonteCarloEstimate {
    pub fn interval(&self) -> (f64, f64) {
        (self.estimate - self.half_width, self.estimate + self.half_width)
    }
}

/// Fraction of OOD test lists lying fully inside the training range.
pub fn monte_carlo_p_in(n: usize, c: f64, trials: usize, seed: u64, exec: Execution) -> Result<MonteCarloEstimate> {
    if trials == 0 {
        return Err(OodError::Param("trials must be positive".into()));
    }
    let batch = sample_test_ood_with(TaskKind::CumulativeSum, c, trials, LengthMode::Fixed(n), seed, exec)?;
    let p = in_domain_fraction(&batch, TRAIN_BOUND);
    Ok(MonteCarloEstimate {
        n,
        c,
        trials,
        estimate: p,
        half_width: 3.0 * (p * (1.0 - p) / trials as f64).sqrt(),
    })
}

/// Bound values on the grid used for the contour plot, one row per `(n, c)`.
pub fn bound_grid(ns: &[usize], cs: &[f64]) -> Result<Vec<OverlapBound>> {
    let mut out = Vec::with_capacity(ns.len() * cs.len());
    for &n in ns {
        for &c in cs {
            out.push(p_in_bound(n, c)?);
        }
    }
    Ok(out)
}

pub fn bound_grid_csv(grid: &[OverlapBound]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["n", "c", "p_in_upper", "branch"]).unwrap();
    for b in grid {
        let branch = match b.branch {
            Branch::General => "n>=3",
            Branch::Pair => "n=2",
        };
        w.write_record([b.n.to_string(), b.c.to_string(), format!("{:.6e}", b.p_in_upper), branch.into()])
            .unwrap();
    }
    String::from_utf8(w.into_inner().unwrap()).unwrap()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttnRecord {
    pub layer: usize,
    pub head: usize,
    pub scale: f64,
    pub matrix: Vec<Vec<f64>>,
}

/// Attention of every layer and head for each scaled input `c·x`.
pub fn attn_dump(params: &ModelParams, x: &[f64], scales: &[f64]) -> Result<Vec<AttnRecord>> {
    let mut out = Vec::new();
    for &c in scales {
        let scaled: Vec<f64> = x.iter().map(|v| c * v).collect();
        for (l, heads) in params.attention_maps(&scaled)?.into_iter().enumerate() {
            for (h, a) in heads.into_iter().enumerate() {
                out.push(AttnRecord {
                    layer: l,
                    head: h,
                    scale: c,
                    matrix: a.rows(),
                });
            }
        }
    }
    Ok(out)
}

/// Same record layout for a compiled network; its attention ignores the input.
pub fn attn_dump_compiled(net: &CompiledNetwork, scales: &[f64]) -> Result<Vec<AttnRecord>> {
    let maps = net.attention_maps()?;
    let mut out = Vec::new();
    for &c in scales {
        for (l, heads) in maps.iter().enumerate() {
            for (h, a) in heads.iter().enumerate() {
                out.push(AttnRecord {
                    layer: l,
                    head: h,
                    scale: c,
                    matrix: a.rows(),
                });
            }
        }
    }
    Ok(out)
}

/// Frobenius distance between two dumps' matrices for the same layer and head.
pub fn frobenius(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    a.iter()
        .flatten()
        .zip(b.iter().flatten())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// The descending ramp input of the attention figures.
pub const RAMP_INPUT: [f64; 8] = [1.75, 1.25, 0.75, 0.25, -0.25, -0.75, -1.25, -1.75];

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{AttentionKind, ModelConfig};
    use crate::tensor::Tensor;

    #[test]
    fn published_values() {
        let b = p_in_bound(2, 2.0).unwrap();
        assert_eq!(b.branch, Branch::Pair);
        assert!((b.p_in_upper - 0.4375).abs() < 1e-15);
        let b = p_in_bound(8, 10.0).unwrap();
        assert!(b.p_in_upper <= 0.0034, "{}", b.p_in_upper);
        assert!((b.p_in_upper - 0.003367).abs() < 1e-5);
        assert!(p_in_bound(8, 3.0).unwrap().p_in_upper < 0.05);
    }

    #[test]
    fn parameter_errors() {
        assert!(p_in_bound(1, 2.0).is_err());
        assert!(p_in_bound(4, 1.0).is_err());
        assert!(chernoff_tail(0, 0.1, 0.1).is_err());
        assert!(chernoff_tail(10, 1.5, 0.1).is_err());
        assert!(chernoff_tail(10, 0.1, 0.0).is_err());
    }

    #[test]
    fn chernoff_examples() {
        let t = chernoff_tail(1000, 0.4375, 0.0625).unwrap();
        assert!((t - (-7.8125f64).exp()).abs() < 1e-18);
        assert!(1.0 - t >= 0.9995);
        let t = chernoff_tail(1000, 0.0034, 0.0466).unwrap();
        assert!(t <= 0.0131 && 1.0 - t >= 0.98);
        assert!(chernoff_tail(1000, 0.1, 10.0).unwrap() < 1e-300);
        assert!(chernoff_tail(2000, 0.1, 0.05).unwrap() < chernoff_tail(1000, 0.1, 0.05).unwrap());
    }

    #[test]
    fn bound_below_simplified_chain_and_monotone() {
        let ns = [2, 3, 4, 8, 16, 32];
        let cs: Vec<f64> = (2..=10).map(f64::from).collect();
        for &n in &ns {
            for w in cs.windows(2) {
                assert!(p_in_bound(n, w[1]).unwrap().p_in_upper <= p_in_bound(n, w[0]).unwrap().p_in_upper);
            }
        }
        for &c in &cs {
            for w in ns.windows(2) {
                assert!(p_in_bound(w[1], c).unwrap().p_in_upper <= p_in_bound(w[0], c).unwrap().p_in_upper);
            }
            for &n in &ns[1..] {
                let nf = n as f64;
                let chain = 2.0 / ((c * c - 1.0) * (nf - 1.0)) + 2.0 / ((nf - 1.0) * (nf - 2.0) * (c * c - 1.0));
                assert!(p_in_bound(n, c).unwrap().p_in_upper <= chain);
            }
        }
        let csv = bound_grid_csv(&bound_grid(&[2, 4], &[2.0, 3.0]).unwrap());
        assert_eq!(csv.lines().count(), 5);
        assert!(csv.starts_with("n,c,p_in_upper,branch\n2,2,4.375000e-1,n=2"));
    }

    #[test]
    fn monte_carlo_is_consistent() {
        let a = monte_carlo_p_in(2, 2.0, 20_000, 1, Execution::Parallel).unwrap();
        let b = monte_carlo_p_in(2, 2.0, 20_000, 2, Execution::Parallel).unwrap();
        let bound = p_in_bound(2, 2.0).unwrap().p_in_upper;
        assert!(a.estimate <= bound + a.half_width);
        assert!((a.estimate - b.estimate).abs() <= a.half_width + b.half_width);
        let s = monte_carlo_p_in(2, 2.0, 20_000, 1, Execution::Sequential).unwrap();
        assert_eq!(a, s);
    }

    #[test]
    fn positional_dumps_ignore_scale() {
        let mut c = ModelConfig::new(8, AttentionKind::Positional);
        c.d_x = 8;
        c.d_v = 4;
        c.d_o = 8;
        c.mlp_hidden = 8;
        let params = ModelParams::init(&c, 3).unwrap();
        let d = attn_dump(&params, &RAMP_INPUT, &[1.0, 8.0]).unwrap();
        let half = d.len() / 2;
        for (a, b) in d[..half].iter().zip(&d[half..]) {
            assert_eq!(a.matrix, b.matrix);
            assert_eq!((a.layer, a.head), (b.layer, b.head));
        }
    }

    #[test]
    fn zero_query_key_gives_uniform_rows() {
        let mut c = ModelConfig::new(8, AttentionKind::SelfAttention);
        c.d_x = 8;
        c.d_v = 4;
        c.d_o = 8;
        c.mlp_hidden = 8;
        let mut params = ModelParams::init(&c, 3).unwrap();
        for l in &mut params.layers {
            for h in &mut l.heads {
                h.w_q = Tensor::zeros(h.w_q.shape());
                h.w_k = Tensor::zeros(h.w_k.shape());
            }
        }
        for rec in attn_dump(&params, &RAMP_INPUT, &[1.0, 2.0, 5.0]).unwrap() {
            for row in rec.matrix {
                assert!(row.iter().all(|&v| (v - 1.0 / 9.0).abs() < 1e-15));
            }
        }
        let trained_like = ModelParams::init(&c, 4).unwrap();
        let d = attn_dump(&trained_like, &RAMP_INPUT, &[1.0, 2.0]).unwrap();
        let half = d.len() / 2;
        assert!(frobenius(&d[half - 1].matrix, &d[d.len() - 1].matrix) > 0.0);
    }
}
