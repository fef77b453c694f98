// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod graphdata;
pub mod numkernel;
pub mod recmodel;
pub mod detect;
pub mod evalrun;
pub mod attack;
pub mod seeds;
