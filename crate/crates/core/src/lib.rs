#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod cli;
pub mod data;
pub mod grpo;
pub mod model;
pub mod patchify;
pub mod pipeline;
pub mod policy;
pub mod tensor;
