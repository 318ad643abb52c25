//! Algorithmic task oracles and the train / OOD-test samplers.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::par::{map_indexed, Execution};

/// Half-width of the training value range `[-2, 2]`.
pub const TRAIN_BOUND: f64 = 2.0;

/// Samples per independently seeded RNG stream.
const STREAM_CHUNK: usize = 512;

#[derive(Debug, Error, PartialEq)]
pub enum TaskError {
    #[error("OOD scale factor must be > 1, got {0}")]
    BadScale(f64),
    #[error("unknown task '{0}'")]
    UnknownTask(String),
    #[error("invalid sampler parameters: {0}")]
    Invalid(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    CumulativeSum,
    CumulativeMin,
    CumulativeMedian,
    Sorting,
    CumulativeMaxSubarray,
}

impl TaskKind {
    pub const ALL: [TaskKind; 5] = [
        TaskKind::CumulativeSum,
        TaskKind::CumulativeMin,
        TaskKind::CumulativeMedian,
        TaskKind::Sorting,
        TaskKind::CumulativeMaxSubarray,
    ];

    pub fn name(self) -> &'static str {
        match self {
            TaskKind::CumulativeSum => "cumulative_sum",
            TaskKind::CumulativeMin => "cumulative_min",
            TaskKind::CumulativeMedian => "cumulative_median",
            TaskKind::Sorting => "sorting",
            TaskKind::CumulativeMaxSubarray => "cumulative_max_subarray",
        }
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TaskKind {
    type Err = TaskError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        TaskKind::ALL
            .into_iter()
            .find(|t| t.name() == s)
            .ok_or_else(|| TaskError::UnknownTask(s.to_string()))
    }
}

/// Ground-truth output of `task` on `x`.
pub fn task_oracle(task: TaskKind, x: &[f64]) -> Vec<f64> {
    match task {
        TaskKind::CumulativeSum => {
            let mut acc = 0.0;
            x.iter()
                .map(|v| {
                    acc += v;
                    acc
                })
                .collect()
        }
        TaskKind::CumulativeMin => {
            let mut acc = f64::INFINITY;
            x.iter()
                .map(|&v| {
                    acc = acc.min(v);
                    acc
                })
                .collect()
        }
        TaskKind::CumulativeMedian => {
            let mut sorted: Vec<f64> = Vec::with_capacity(x.len());
            x.iter()
                .map(|&v| {
                    let pos = sorted.partition_point(|&s| s < v);
                    sorted.insert(pos, v);
                    let k = sorted.len();
                    if k % 2 == 1 {
                        sorted[k / 2]
                    } else {
                        (sorted[k / 2 - 1] + sorted[k / 2]) / 2.0
                    }
                })
                .collect()
        }
        TaskKind::Sorting => {
            let mut s = x.to_vec();
            s.sort_by(f64::total_cmp);
            s
        }
        TaskKind::CumulativeMaxSubarray => {
            // Kadane's recurrence over each prefix.
            let mut best = f64::NEG_INFINITY;
            let mut ending = f64::NEG_INFINITY;
            x.iter()
                .map(|&v| {
                    ending = if ending > 0.0 { ending + v } else { v };
                    best = best.max(ending);
                    best
                })
                .collect()
        }
    }
}

/// Per-sample record of how the values were drawn.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleMeta {
    pub gamma_l: f64,
    pub gamma_u: f64,
    pub scale: f64,
}

/// A group of samples with their targets.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskBatch {
    pub task: TaskKind,
    pub inputs: Vec<Vec<f64>>,
    pub targets: Vec<Vec<f64>>,
    pub meta: Vec<SampleMeta>,
}

impl TaskBatch {
    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    pub fn lengths(&self) -> Vec<usize> {
        self.inputs.iter().map(Vec::len).collect()
    }

    pub fn from_inputs(task: TaskKind, inputs: Vec<Vec<f64>>, meta: Vec<SampleMeta>) -> Self {
        let targets = inputs.iter().map(|x| task_oracle(task, x)).collect();
        TaskBatch {
            task,
            inputs,
            targets,
            meta,
        }
    }

    /// Splits into sub-batches that each hold a single input length,
    /// ordered by length; within a group, original order is kept.
    pub fn group_by_length(&self) -> Vec<TaskBatch> {
        let mut lens = self.lengths();
        lens.sort_unstable();
        lens.dedup();
        lens.into_iter()
            .map(|m| {
                let idx: Vec<usize> = (0..self.len()).filter(|&i| self.inputs[i].len() == m).collect();
                self.select(&idx)
            })
            .collect()
    }

    pub fn select(&self, idx: &[usize]) -> TaskBatch {
        TaskBatch {
            task: self.task,
            inputs: idx.iter().map(|&i| self.inputs[i].clone()).collect(),
            targets: idx.iter().map(|&i| self.targets[i].clone()).collect(),
            meta: idx.iter().map(|&i| self.meta[i]).collect(),
        }
    }

    /// JSON-lines dump, one record per sample.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for i in 0..self.len() {
            let rec = SampleRecord {
                task: self.task,
                length: self.inputs[i].len(),
                gamma_l: self.meta[i].gamma_l,
                gamma_u: self.meta[i].gamma_u,
                scale: self.meta[i].scale,
                input: self.inputs[i].clone(),
                target: self.targets[i].clone(),
            };
            out.push_str(&serde_json::to_string(&rec).expect("plain data serializes"));
            out.push('\n');
        }
        out
    }

    pub fn from_jsonl(text: &str) -> serde_json::Result<Self> {
        let recs: Vec<SampleRecord> = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(serde_json::from_str)
            .collect::<serde_json::Result<_>>()?;
        let task = recs.first().map_or(TaskKind::CumulativeSum, |r| r.task);
        Ok(TaskBatch {
            task,
            meta: recs
                .iter()
                .map(|r| SampleMeta {
                    gamma_l: r.gamma_l,
                    gamma_u: r.gamma_u,
                    scale: r.scale,
                })
                .collect(),
            inputs: recs.iter().map(|r| r.input.clone()).collect(),
            targets: recs.into_iter().map(|r| r.target).collect(),
        })
    }
}

#[derive(Serialize, Deserialize)]
struct SampleRecord {
    task: TaskKind,
    length: usize,
    gamma_l: f64,
    gamma_u: f64,
    scale: f64,
    input: Vec<f64>,
    target: Vec<f64>,
}

/// Which input lengths a sampler produces.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LengthMode {
    Fixed(usize),
    /// Uniform over `1..=max`.
    Variable(usize),
}

impl LengthMode {
    pub fn max_len(self) -> usize {
        match self {
            LengthMode::Fixed(m) | LengthMode::Variable(m) => m,
        }
    }
}

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn draw_length(rng: &mut impl Rng, lengths: LengthMode) -> usize {
    match lengths {
        LengthMode::Fixed(m) => m,
        LengthMode::Variable(n) => rng.gen_range(1..=n),
    }
}

fn draw_values(rng: &mut impl Rng, m: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..m)
        .map(|_| if lo == hi { lo } else { rng.gen_range(lo..=hi) })
        .collect()
}

fn ordered_pair(rng: &mut impl Rng, bound: f64) -> (f64, f64) {
    let a = rng.gen_range(-bound..=bound);
    let b = rng.gen_range(-bound..=bound);
    if a > b {
        (b, a)
    } else {
        (a, b)
    }
}

fn sample_chunked<F>(count: usize, seed: u64, exec: Execution, draw: F) -> (Vec<Vec<f64>>, Vec<SampleMeta>)
where
    F: Fn(&mut ChaCha8Rng) -> (Vec<f64>, SampleMeta) + Sync + Send,
{
    let chunks = count.div_ceil(STREAM_CHUNK);
    let parts = map_indexed(exec, chunks, |c| {
        let mut rng = stream_rng(seed, c as u64);
        let take = STREAM_CHUNK.min(count - c * STREAM_CHUNK);
        (0..take).map(|_| draw(&mut rng)).collect::<Vec<_>>()
    });
    parts.into_iter().flatten().unzip()
}

/// In-distribution sampler: per sample, bounds `γl <= γu` drawn uniformly
/// from `[-range_bound, range_bound]`, then entries i.i.d. in `[γl, γu]`.
pub fn sample_train(task: TaskKind, count: usize, range_bound: f64, lengths: LengthMode, seed: u64) -> TaskBatch {
    sample_train_with(task, count, range_bound, lengths, seed, Execution::default())
}

pub fn sample_train_with(
    task: TaskKind,
    count: usize,
    range_bound: f64,
    lengths: LengthMode,
    seed: u64,
    exec: Execution,
) -> TaskBatch {
    let (inputs, meta) = sample_chunked(count, seed, exec, |rng| {
        let m = draw_length(rng, lengths);
        let (lo, hi) = ordered_pair(rng, range_bound);
        (
            draw_values(rng, m, lo, hi),
            SampleMeta {
                gamma_l: lo,
                gamma_u: hi,
                scale: 1.0,
            },
        )
    });
    TaskBatch::from_inputs(task, inputs, meta)
}

/// OOD test sampler: bounds drawn from `[-2c, 2c]` and resampled until
/// `γl < -2` or `γu > 2`.
pub fn sample_test_ood(task: TaskKind, c: f64, count: usize, lengths: LengthMode, seed: u64) -> Result<TaskBatch, TaskError> {
    sample_test_ood_with(task, c, count, lengths, seed, Execution::default())
}

pub fn sample_test_ood_with(
    task: TaskKind,
    c: f64,
    count: usize,
    lengths: LengthMode,
    seed: u64,
    exec: Execution,
) -> Result<TaskBatch, TaskError> {
    if !(c > 1.0) || !c.is_finite() {
        return Err(TaskError::BadScale(c));
    }
    let bound = TRAIN_BOUND * c;
    let (inputs, meta) = sample_chunked(count, seed, exec, |rng| {
        let m = draw_length(rng, lengths);
        let (lo, hi) = loop {
            let (lo, hi) = ordered_pair(rng, bound);
            if lo < -TRAIN_BOUND || hi > TRAIN_BOUND {
                break (lo, hi);
            }
        };
        (
            draw_values(rng, m, lo, hi),
            SampleMeta {
                gamma_l: lo,
                gamma_u: hi,
                scale: c,
            },
        )
    });
    Ok(TaskBatch::from_inputs(task, inputs, meta))
}

/// Fraction of samples whose entries all lie in `[-bound, bound]`.
pub fn in_domain_fraction(batch: &TaskBatch, bound: f64) -> f64 {
    if batch.is_empty() {
        return 0.0;
    }
    let inside = batch
        .inputs
        .iter()
        .filter(|x| x.iter().all(|v| v.abs() <= bound))
        .count();
    inside as f64 / batch.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    // Brute-force oracles written independently of the implementations above.
    fn brute(task: TaskKind, x: &[f64]) -> Vec<f64> {
        (1..=x.len())
            .map(|i| {
                let p = &x[..i];
                match task {
                    TaskKind::CumulativeSum => p.iter().sum(),
                    TaskKind::CumulativeMin => p.iter().cloned().fold(f64::INFINITY, f64::min),
                    TaskKind::CumulativeMedian => {
                        // the k-th order statistic is the value with k smaller-or-equal peers
                        let order = |k: usize| {
                            *p.iter()
                                .find(|&&v| {
                                    let less = p.iter().filter(|&&w| w < v).count();
                                    let le = p.iter().filter(|&&w| w <= v).count();
                                    less <= k && k < le
                                })
                                .unwrap()
                        };
                        if i % 2 == 1 {
                            order(i / 2)
                        } else {
                            (order(i / 2 - 1) + order(i / 2)) / 2.0
                        }
                    }
                    TaskKind::Sorting => {
                        let j = i - 1;
                        *x.iter()
                            .find(|&&v| {
                                let less = x.iter().filter(|&&w| w < v).count();
                                let le = x.iter().filter(|&&w| w <= v).count();
                                less <= j && j < le
                            })
                            .unwrap()
                    }
                    TaskKind::CumulativeMaxSubarray => {
                        let mut best = f64::NEG_INFINITY;
                        for a in 0..i {
                            for b in a..i {
                                best = best.max(x[a..=b].iter().sum());
                            }
                        }
                        best
                    }
                }
            })
            .collect()
    }

    #[test]
    fn oracle_examples() {
        assert_eq!(task_oracle(TaskKind::CumulativeSum, &[1.0, 2.0, 3.0]), vec![1.0, 3.0, 6.0]);
        assert_eq!(task_oracle(TaskKind::CumulativeMin, &[2.0, 1.0, 3.0]), vec![2.0, 1.0, 1.0]);
        assert_eq!(
            task_oracle(TaskKind::CumulativeMaxSubarray, &[1.0, -2.0, 3.0]),
            vec![1.0, 1.0, 3.0]
        );
        assert_eq!(task_oracle(TaskKind::Sorting, &[0.5, -1.0, 0.0]), vec![-1.0, 0.0, 0.5]);
        assert_eq!(
            task_oracle(TaskKind::CumulativeMedian, &[1.0, 3.0, 2.0]),
            vec![1.0, 2.0, 2.0]
        );
        for t in TaskKind::ALL {
            assert_eq!(brute(t, &[1.0, -2.0, 3.0]), task_oracle(t, &[1.0, -2.0, 3.0]));
        }
    }

    #[test]
    fn oracles_match_brute_force() {
        let mut rng = stream_rng(7, 0);
        for t in TaskKind::ALL {
            for _ in 0..1000 {
                let m = rng.gen_range(1..=12);
                let x: Vec<f64> = (0..m).map(|_| rng.gen_range(-5.0..5.0)).collect();
                // sums may associate differently; compare within a few ulps of the magnitude
                let (a, b) = (task_oracle(t, &x), brute(t, &x));
                for (u, v) in a.iter().zip(&b) {
                    assert!((u - v).abs() <= 1e-12 * (1.0 + v.abs()), "{t}: {x:?}");
                }
                if t != TaskKind::CumulativeSum && t != TaskKind::CumulativeMaxSubarray {
                    assert_eq!(a, b);
                }
            }
        }
    }

    #[test]
    fn sampler_bounds_and_determinism() {
        let b = sample_train(TaskKind::Sorting, 2000, 2.0, LengthMode::Fixed(8), 3);
        assert!(b.inputs.iter().flatten().all(|v| v.abs() <= 2.0));
        for (x, m) in b.inputs.iter().zip(&b.meta) {
            assert!(m.gamma_l <= m.gamma_u);
            assert!(x.iter().all(|&v| v >= m.gamma_l && v <= m.gamma_u));
        }
        assert_eq!(b, sample_train(TaskKind::Sorting, 2000, 2.0, LengthMode::Fixed(8), 3));
        assert_eq!(in_domain_fraction(&b, 2.0), 1.0);
        let seq = sample_train_with(TaskKind::Sorting, 2000, 2.0, LengthMode::Fixed(8), 3, Execution::Sequential);
        assert_eq!(b, seq);
    }

    #[test]
    fn variable_lengths_cover_range() {
        let b = sample_train(TaskKind::CumulativeSum, 4000, 2.0, LengthMode::Variable(8), 1);
        let mut counts = [0usize; 9];
        for x in &b.inputs {
            counts[x.len()] += 1;
        }
        assert_eq!(counts[0], 0);
        for &c in &counts[1..] {
            assert!((350..650).contains(&c), "{counts:?}");
        }
        let groups = b.group_by_length();
        assert_eq!(groups.len(), 8);
        assert_eq!(groups.iter().map(TaskBatch::len).sum::<usize>(), 4000);
    }

    #[test]
    fn ood_rejection_predicate() {
        let b = sample_test_ood(TaskKind::CumulativeMin, 3.0, 5000, LengthMode::Fixed(4), 9).unwrap();
        for m in &b.meta {
            assert!(m.gamma_l < -2.0 || m.gamma_u > 2.0);
            assert!(m.gamma_l >= -6.0 && m.gamma_u <= 6.0);
        }
        assert_eq!(
            sample_test_ood(TaskKind::CumulativeMin, 1.0, 5, LengthMode::Fixed(4), 9).unwrap_err(),
            TaskError::BadScale(1.0)
        );
    }

    #[test]
    fn out_of_range_entry_counts_as_outside() {
        let b = TaskBatch::from_inputs(
            TaskKind::Sorting,
            vec![vec![0.0, 5.0], vec![1.0, -1.0]],
            vec![SampleMeta { gamma_l: 0.0, gamma_u: 0.0, scale: 1.0 }; 2],
        );
        assert_eq!(in_domain_fraction(&b, 2.0), 0.5);
    }

    #[test]
    fn train_tail_fraction_matches_independent_monte_carlo() {
        // P(max|x| > 1) for the two-stage sampler, estimated by a separate
        // simulation that uses its own RNG and draws.
        let b = sample_train(TaskKind::Sorting, 100_000, 2.0, LengthMode::Fixed(8), 11);
        let observed = b.inputs.iter().filter(|x| x.iter().any(|v| v.abs() > 1.0)).count() as f64 / 1e5;

        let mut rng = ChaCha8Rng::seed_from_u64(999);
        let trials = 200_000;
        let mut hits = 0;
        for _ in 0..trials {
            let a: f64 = rng.gen::<f64>() * 4.0 - 2.0;
            let c: f64 = rng.gen::<f64>() * 4.0 - 2.0;
            let (lo, hi) = (a.min(c), a.max(c));
            if (0..8).any(|_| (lo + (hi - lo) * rng.gen::<f64>()).abs() > 1.0) {
                hits += 1;
            }
        }
        let reference = hits as f64 / trials as f64;
        let sigma = (reference * (1.0 - reference) / 1e5).sqrt() + (reference * (1.0 - reference) / trials as f64).sqrt();
        assert!((observed - reference).abs() < 3.0 * sigma, "{observed} vs {reference}");
    }

    #[test]
    fn jsonl_round_trip() {
        let b = sample_test_ood(TaskKind::CumulativeMedian, 2.0, 20, LengthMode::Variable(5), 4).unwrap();
        assert_eq!(TaskBatch::from_jsonl(&b.to_jsonl()).unwrap(), b);
    }

    proptest! {
        #[test]
        fn oracle_invariants(x in prop::collection::vec(-100.0f64..100.0, 1..16), rot in 0usize..16) {
            let s = task_oracle(TaskKind::Sorting, &x);
            prop_assert_eq!(task_oracle(TaskKind::Sorting, &s), s.clone());
            let mut y = x.clone();
            y.rotate_left(rot % x.len());
            y.reverse();
            prop_assert_eq!(task_oracle(TaskKind::Sorting, &y), s);

            let mins = task_oracle(TaskKind::CumulativeMin, &x);
            prop_assert!(mins.windows(2).all(|w| w[1] <= w[0]));

            let sums = task_oracle(TaskKind::CumulativeSum, &x);
            prop_assert_eq!(sums[0], x[0]);
            for i in 1..x.len() {
                let d = sums[i] - sums[i - 1];
                prop_assert!((d - x[i]).abs() <= 1e-9 * (1.0 + sums[i].abs()));
            }
        }
    }
}
