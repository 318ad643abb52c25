//! Positional attention: models, tasks, parallel-computation simulation and
//! the compiler from parallel algorithms to positional Transformers.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod compiler;
pub mod harness;
pub mod model;
pub mod ood;
pub mod par;
pub mod pcoc;
pub mod tasks;
pub mod tensor;
