//! Parallel computation with oracle communication.
//!
//! Machines and memory positions are numbered from 1, as in the model's
//! definition. In every round each machine asks the oracle `(round, machine)`
//! which `(source, positions)` to receive; a received value lands at the same
//! position it was read from, positions not received read as zero, and the
//! machine's local function then overwrites its memory.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::par::{map_indexed, Execution};

/// Built-in local computations.
///
/// Reductions range over the positions received in the current round and
/// write their result to every position.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LocalFn {
    Min,
    Max,
    Sum,
    /// Supported by the simulator only; the compiler has no exact construction for it.
    Product,
    Identity,
    Zero,
}

impl LocalFn {
    /// `mem` has unreceived positions already zeroed; `received[z]` marks position `z + 1`.
    pub fn apply(self, mem: &[f64], received: &[bool]) -> Vec<f64> {
        if matches!(self, LocalFn::Identity) {
            return mem.to_vec();
        }
        if matches!(self, LocalFn::Zero) || !received.contains(&true) {
            return vec![0.0; mem.len()];
        }
        let vals = mem.iter().zip(received).filter(|(_, &r)| r).map(|(&v, _)| v);
        let reduced = match self {
            LocalFn::Min => vals.fold(f64::INFINITY, f64::min),
            LocalFn::Max => vals.fold(f64::NEG_INFINITY, f64::max),
            LocalFn::Sum => vals.sum(),
            _ => vals.product(),
        };
        vec![reduced; mem.len()]
    }
}

/// One oracle entry: receive `positions` of machine `source`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Receive {
    pub source: usize,
    pub positions: Vec<usize>,
}

impl Receive {
    pub fn new(source: usize, positions: &[usize]) -> Self {
        Receive {
            source,
            positions: positions.to_vec(),
        }
    }
}

/// A protocol: `oracle[r][i]` and `local_fns[r][i]` for round `r + 1`, machine `i + 1`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PcocInstance {
    pub machines: usize,
    pub rounds: usize,
    pub mem_size: usize,
    pub oracle: Vec<Vec<Vec<Receive>>>,
    pub local_fns: Vec<Vec<LocalFn>>,
}

#[derive(Clone, Debug, PartialEq, Eq, Error)]
pub enum Violation {
    #[error("instance tables do not match N={machines}, R={rounds}")]
    Shape { machines: usize, rounds: usize },
    #[error("round {round}, machine {machine}: bad reference to machine {from}, position {position}")]
    BadIndex {
        round: usize,
        machine: usize,
        from: usize,
        position: usize,
    },
    #[error("round {round}, machine {machine}: empty position set from machine {from}")]
    EmptyPositions { round: usize, machine: usize, from: usize },
    #[error("round {round}, machine {machine}: receives {count} positions, budget is {budget}")]
    ReceiveBudget {
        round: usize,
        machine: usize,
        count: usize,
        budget: usize,
    },
    #[error("round {round}, machine {machine}: sends {count} positions, budget is {budget}")]
    SendBudget {
        round: usize,
        machine: usize,
        count: usize,
        budget: usize,
    },
    #[error("round {round}: collision at (machine {dest}, position {position}) from machines {first} and {second}")]
    Collision {
        round: usize,
        dest: usize,
        position: usize,
        first: usize,
        second: usize,
    },
}

#[derive(Debug, Error)]
pub enum PcocError {
    #[error("invalid instance: {0}")]
    Invalid(#[from] Violation),
    #[error("expected {expected} input values, got {got}")]
    InputLength { expected: usize, got: usize },
}

/// Memories of all machines after `round` rounds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MachineState {
    pub round: usize,
    pub mem: Vec<Vec<f64>>,
}

impl MachineState {
    /// Each machine's first memory position.
    pub fn outputs(&self) -> Vec<f64> {
        self.mem.iter().map(|m| m[0]).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Delivery {
    pub source: usize,
    pub dest: usize,
    pub position: usize,
    pub value: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundTrace {
    pub round: usize,
    pub deliveries: Vec<Delivery>,
    pub memories: Vec<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trace {
    pub initial: Vec<Vec<f64>>,
    pub rounds: Vec<RoundTrace>,
}

impl PcocInstance {
    /// Oracle answer for 1-based `(round, machine)`.
    pub fn rcv(&self, round: usize, machine: usize) -> &[Receive] {
        &self.oracle[round - 1][machine - 1]
    }

    pub fn local_fn(&self, round: usize, machine: usize) -> LocalFn {
        self.local_fns[round - 1][machine - 1]
    }

    /// Which positions machine `machine` receives in `round`.
    pub fn received_mask(&self, round: usize, machine: usize) -> Vec<bool> {
        let mut mask = vec![false; self.mem_size];
        for rc in self.rcv(round, machine) {
            for &z in &rc.positions {
                mask[z - 1] = true;
            }
        }
        mask
    }

    /// Checks table shapes, indices, both data budgets and the no-collision
    /// rule, reporting the first violation in round, machine order.
    pub fn validate(&self) -> Result<(), Violation> {
        let (n, s) = (self.machines, self.mem_size);
        let shape_ok = self.oracle.len() == self.rounds
            && self.local_fns.len() == self.rounds
            && self.oracle.iter().all(|r| r.len() == n)
            && self.local_fns.iter().all(|r| r.len() == n);
        if !shape_ok || s == 0 {
            return Err(Violation::Shape {
                machines: n,
                rounds: self.rounds,
            });
        }
        for r in 1..=self.rounds {
            let mut owner: Vec<Vec<Option<usize>>> = vec![vec![None; s]; n];
            let mut sent = vec![0usize; n];
            for i in 1..=n {
                let count: usize = self.rcv(r, i).iter().map(|rc| rc.positions.len()).sum();
                if count > s {
                    return Err(Violation::ReceiveBudget {
                        round: r,
                        machine: i,
                        count,
                        budget: s,
                    });
                }
                for rc in self.rcv(r, i) {
                    if rc.positions.is_empty() {
                        return Err(Violation::EmptyPositions {
                            round: r,
                            machine: i,
                            from: rc.source,
                        });
                    }
                    for &z in &rc.positions {
                        if rc.source == 0 || rc.source > n || z == 0 || z > s {
                            return Err(Violation::BadIndex {
                                round: r,
                                machine: i,
                                from: rc.source,
                                position: z,
                            });
                        }
                        if let Some(first) = owner[i - 1][z - 1] {
                            return Err(Violation::Collision {
                                round: r,
                                dest: i,
                                position: z,
                                first,
                                second: rc.source,
                            });
                        }
                        owner[i - 1][z - 1] = Some(rc.source);
                        sent[rc.source - 1] += 1;
                    }
                }
            }
            if let Some(j) = sent.iter().position(|&c| c > s) {
                return Err(Violation::SendBudget {
                    round: r,
                    machine: j + 1,
                    count: sent[j],
                    budget: s,
                });
            }
        }
        Ok(())
    }

    /// Input value `i` is written to every position of machine `i`.
    pub fn initial_state(&self, input: &[f64]) -> Result<MachineState, PcocError> {
        if input.len() != self.machines {
            return Err(PcocError::InputLength {
                expected: self.machines,
                got: input.len(),
            });
        }
        Ok(MachineState {
            round: 0,
            mem: input.iter().map(|&x| vec![x; self.mem_size]).collect(),
        })
    }

    fn step(&self, state: &MachineState, exec: Execution, trace: Option<&mut Vec<Delivery>>) -> MachineState {
        let r = state.round + 1;
        let s = self.mem_size;
        let mem = map_indexed(exec, self.machines, |i| {
            let machine = i + 1;
            let mut buf = vec![0.0; s];
            for rc in self.rcv(r, machine) {
                for &z in &rc.positions {
                    buf[z - 1] = state.mem[rc.source - 1][z - 1];
                }
            }
            self.local_fn(r, machine).apply(&buf, &self.received_mask(r, machine))
        });
        if let Some(out) = trace {
            for i in 1..=self.machines {
                for rc in self.rcv(r, i) {
                    for &z in &rc.positions {
                        out.push(Delivery {
                            source: rc.source,
                            dest: i,
                            position: z,
                            value: state.mem[rc.source - 1][z - 1],
                        });
                    }
                }
            }
        }
        MachineState { round: r, mem }
    }

    pub fn run(&self, input: &[f64]) -> Result<MachineState, PcocError> {
        self.run_with(input, Execution::Sequential)
    }

    pub fn run_with(&self, input: &[f64], exec: Execution) -> Result<MachineState, PcocError> {
        self.validate()?;
        let mut state = self.initial_state(input)?;
        for _ in 0..self.rounds {
            state = self.step(&state, exec, None);
        }
        Ok(state)
    }

    /// Runs and records every delivery and the memories after each round.
    pub fn run_traced(&self, input: &[f64]) -> Result<(MachineState, Trace), PcocError> {
        self.validate()?;
        let mut state = self.initial_state(input)?;
        let mut trace = Trace {
            initial: state.mem.clone(),
            rounds: Vec::with_capacity(self.rounds),
        };
        for _ in 0..self.rounds {
            let mut deliveries = Vec::new();
            state = self.step(&state, Execution::Sequential, Some(&mut deliveries));
            trace.rounds.push(RoundTrace {
                round: state.round,
                deliveries,
                memories: state.mem.clone(),
            });
        }
        Ok((state, trace))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReduceOp {
    Min,
    Sum,
}

impl fmt::Display for ReduceOp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ReduceOp::Min => "min",
            ReduceOp::Sum => "sum",
        })
    }
}

/// The built-in protocols by name.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Algorithm {
    TreeMin,
    TreeSum,
    CumulativeMin,
    CumulativeSum,
    OddEvenSort,
}

impl Algorithm {
    pub const ALL: [Algorithm; 5] = [
        Algorithm::TreeMin,
        Algorithm::TreeSum,
        Algorithm::CumulativeMin,
        Algorithm::CumulativeSum,
        Algorithm::OddEvenSort,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Algorithm::TreeMin => "tree_min",
            Algorithm::TreeSum => "tree_sum",
            Algorithm::CumulativeMin => "cumulative_min",
            Algorithm::CumulativeSum => "cumulative_sum",
            Algorithm::OddEvenSort => "odd_even_sort",
        }
    }

    pub fn build(self, n: usize) -> PcocInstance {
        match self {
            Algorithm::TreeMin => build_tree_reduce(n, ReduceOp::Min, false),
            Algorithm::TreeSum => build_tree_reduce(n, ReduceOp::Sum, false),
            Algorithm::CumulativeMin => build_tree_reduce(n, ReduceOp::Min, true),
            Algorithm::CumulativeSum => build_tree_reduce(n, ReduceOp::Sum, true),
            Algorithm::OddEvenSort => build_odd_even_sort(n),
        }
    }
}

impl fmt::Display for Algorithm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Algorithm {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Algorithm::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| format!("unknown algorithm '{s}'"))
    }
}

fn ceil_log2(n: usize) -> usize {
    let mut r = 0;
    while (1usize << r) < n {
        r += 1;
    }
    r
}

/// Binary-tree reduction over `⌈log₂ N⌉` rounds with memory size 2.
///
/// Cumulative: in round `r` machine `i` combines its own value with that of
/// machine `i - 2^(r-1)`, so machine `i` ends with the prefix reduction over
/// `1..=i`. Otherwise only the tree edges into machines with
/// `(N - i) mod 2^r = 0` are kept and machine `N` ends with the total.
pub fn build_tree_reduce(n: usize, op: ReduceOp, cumulative: bool) -> PcocInstance {
    assert!(n >= 1, "tree reduction needs at least one machine");
    let rounds = ceil_log2(n);
    let f = match op {
        ReduceOp::Min => LocalFn::Min,
        ReduceOp::Sum => LocalFn::Sum,
    };
    let mut oracle = Vec::with_capacity(rounds);
    let mut local_fns = Vec::with_capacity(rounds);
    for r in 1..=rounds {
        let stride = 1usize << (r - 1);
        let mut rcv = Vec::with_capacity(n);
        let mut fns = Vec::with_capacity(n);
        for i in 1..=n {
            let active = cumulative || (n - i).is_multiple_of(2 * stride);
            if !active {
                rcv.push(Vec::new());
                fns.push(LocalFn::Zero);
                continue;
            }
            let mut entries = vec![Receive::new(i, &[1])];
            if i > stride {
                entries.push(Receive::new(i - stride, &[2]));
            }
            rcv.push(entries);
            fns.push(f);
        }
        oracle.push(rcv);
        local_fns.push(fns);
    }
    PcocInstance {
        machines: n,
        rounds,
        mem_size: 2,
        oracle,
        local_fns,
    }
}

/// Odd-even transposition sort with memory size 2.
///
/// Odd rounds compare pairs `(1,2), (3,4), …`, even rounds `(2,3), (4,5), …`;
/// the lower machine keeps the minimum and the higher the maximum. Runs `N`
/// rounds, which sorts every input.
pub fn build_odd_even_sort(n: usize) -> PcocInstance {
    assert!(n >= 2, "sorting needs at least two machines");
    let rounds = n;
    let mut oracle = Vec::with_capacity(rounds);
    let mut local_fns = Vec::with_capacity(rounds);
    for r in 1..=rounds {
        let first = if r % 2 == 1 { 1 } else { 2 };
        let mut rcv = vec![Vec::new(); n];
        let mut fns = vec![LocalFn::Identity; n];
        for i in 1..=n {
            rcv[i - 1] = vec![Receive::new(i, &[1, 2])];
        }
        let mut lo = first;
        while lo < n {
            let hi = lo + 1;
            rcv[lo - 1] = vec![Receive::new(lo, &[1]), Receive::new(hi, &[2])];
            rcv[hi - 1] = vec![Receive::new(hi, &[1]), Receive::new(lo, &[2])];
            fns[lo - 1] = LocalFn::Min;
            fns[hi - 1] = LocalFn::Max;
            lo += 2;
        }
        oracle.push(rcv);
        local_fns.push(fns);
    }
    PcocInstance {
        machines: n,
        rounds,
        mem_size: 2,
        oracle,
        local_fns,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn prefix(x: &[f64], f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
        let mut out = Vec::new();
        for i in 0..x.len() {
            out.push(x[..=i].iter().copied().reduce(&f).unwrap());
        }
        out
    }

    #[test]
    fn builtins_validate() {
        for n in 1..=33 {
            for op in [ReduceOp::Min, ReduceOp::Sum] {
                build_tree_reduce(n, op, true).validate().unwrap();
                build_tree_reduce(n, op, false).validate().unwrap();
            }
            if n >= 2 {
                build_odd_even_sort(n).validate().unwrap();
            }
        }
    }

    #[test]
    fn collision_names_destination_and_position() {
        let mut inst = build_tree_reduce(4, ReduceOp::Min, true);
        inst.oracle[0][2] = vec![Receive::new(1, &[1]), Receive::new(2, &[1])];
        let v = inst.validate().unwrap_err();
        assert_eq!(
            v,
            Violation::Collision {
                round: 1,
                dest: 3,
                position: 1,
                first: 1,
                second: 2
            }
        );
        assert!(matches!(inst.run(&[0.0; 4]), Err(PcocError::Invalid(_))));
    }

    #[test]
    fn budget_violations_reported() {
        let mut inst = PcocInstance {
            machines: 3,
            rounds: 1,
            mem_size: 2,
            oracle: vec![vec![
                vec![Receive::new(1, &[1, 2])],
                vec![Receive::new(2, &[1, 2])],
                vec![Receive::new(3, &[1]), Receive::new(1, &[2]), Receive::new(2, &[2])],
            ]],
            local_fns: vec![vec![LocalFn::Identity; 3]],
        };
        assert_eq!(
            inst.validate(),
            Err(Violation::ReceiveBudget {
                round: 1,
                machine: 3,
                count: 3,
                budget: 2
            })
        );
        // machine 1 sends both positions to itself and one to machines 2 and 3
        inst.oracle[0][1] = vec![Receive::new(1, &[1])];
        inst.oracle[0][2] = vec![Receive::new(1, &[2])];
        assert_eq!(
            inst.validate(),
            Err(Violation::SendBudget {
                round: 1,
                machine: 1,
                count: 4,
                budget: 2
            })
        );
        inst.oracle[0][0] = vec![];
        inst.validate().unwrap();
        inst.oracle[0][2] = vec![Receive::new(4, &[1])];
        assert!(matches!(inst.validate(), Err(Violation::BadIndex { from: 4, .. })));
        inst.oracle[0][2] = vec![Receive::new(1, &[])];
        assert!(matches!(inst.validate(), Err(Violation::EmptyPositions { .. })));
    }

    #[test]
    fn spec_examples() {
        let inst = build_tree_reduce(1, ReduceOp::Min, true);
        assert_eq!(inst.rounds, 0);
        assert_eq!(inst.run(&[4.5]).unwrap().outputs(), vec![4.5]);

        let out = build_tree_reduce(4, ReduceOp::Sum, false).run(&[1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(out.outputs()[3], 10.0);
        let out = build_tree_reduce(4, ReduceOp::Min, true).run(&[2.0, 1.0, 3.0, 0.0]).unwrap();
        assert_eq!(out.outputs(), vec![2.0, 1.0, 1.0, 0.0]);

        let out = build_odd_even_sort(2).run(&[5.0, 1.0]).unwrap();
        assert_eq!(out.outputs(), vec![1.0, 5.0]);
        let out = build_odd_even_sort(4).run(&[3.0, 1.0, 4.0, 2.0]).unwrap();
        assert_eq!(out.outputs(), vec![1.0, 2.0, 3.0, 4.0]);
        let out = build_odd_even_sort(4).run(&[4.0, 3.0, 2.0, 1.0]).unwrap();
        assert_eq!(out.outputs(), vec![1.0, 2.0, 3.0, 4.0]);
        let sorted = [1.0, 2.0, 3.0, 7.0, 9.0];
        assert_eq!(build_odd_even_sort(5).run(&sorted).unwrap().outputs(), sorted.to_vec());
    }

    #[test]
    fn n_minus_one_rounds_are_not_enough() {
        let mut inst = build_odd_even_sort(4);
        inst.rounds = 3;
        inst.oracle.truncate(3);
        inst.local_fns.truncate(3);
        assert_eq!(inst.run(&[4.0, 3.0, 2.0, 1.0]).unwrap().outputs(), vec![1.0, 3.0, 2.0, 4.0]);
    }

    #[test]
    fn zero_rounds_keep_initial_placement() {
        let inst = PcocInstance {
            machines: 3,
            rounds: 0,
            mem_size: 2,
            oracle: vec![],
            local_fns: vec![],
        };
        let st = inst.run(&[1.0, 2.0, 3.0]).unwrap();
        assert_eq!(st, inst.initial_state(&[1.0, 2.0, 3.0]).unwrap());
    }

    #[test]
    fn random_inputs_match_direct_reductions() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for n in [2, 3, 4, 5, 8, 13, 16, 32] {
            for _ in 0..50 {
                let x: Vec<f64> = (0..n).map(|_| rng.gen_range(-5.0..5.0)).collect();
                let cm = build_tree_reduce(n, ReduceOp::Min, true).run(&x).unwrap().outputs();
                assert_eq!(cm, prefix(&x, f64::min));
                let nm = build_tree_reduce(n, ReduceOp::Min, false).run(&x).unwrap().outputs();
                assert_eq!(nm[n - 1], x.iter().copied().fold(f64::INFINITY, f64::min));
                let ns = build_tree_reduce(n, ReduceOp::Sum, false).run(&x).unwrap().outputs();
                let direct: f64 = x.iter().sum();
                assert!((ns[n - 1] - direct).abs() < 1e-12);
                let mut sorted = x.clone();
                sorted.sort_by(f64::total_cmp);
                if n <= 16 {
                    assert_eq!(build_odd_even_sort(n).run(&x).unwrap().outputs(), sorted);
                }
            }
        }
    }

    #[test]
    fn trace_records_deliveries() {
        let inst = build_tree_reduce(4, ReduceOp::Min, true);
        let (st, tr) = inst.run_traced(&[2.0, 1.0, 3.0, 0.0]).unwrap();
        assert_eq!(tr.rounds.len(), 2);
        assert_eq!(tr.rounds[1].memories, st.mem);
        assert!(tr.rounds[0].deliveries.contains(&Delivery {
            source: 1,
            dest: 2,
            position: 2,
            value: 2.0
        }));
        let json = serde_json::to_string(&tr).unwrap();
        let back: Trace = serde_json::from_str(&json).unwrap();
        assert_eq!(back, tr);
    }

    #[test]
    fn parallel_matches_sequential() {
        let inst = build_odd_even_sort(7);
        let x = [0.3, -1.0, 2.0, 9.0, -4.0, 0.0, 1.5];
        assert_eq!(
            inst.run_with(&x, Execution::Parallel).unwrap(),
            inst.run_with(&x, Execution::Sequential).unwrap()
        );
    }
}
