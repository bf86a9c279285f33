#![allow(clippy::neg_cmp_op_on_partial_ord)]
pub mod gradkit;
pub mod ssm;
pub mod smr;
pub mod nss;
pub mod etc;
pub mod pendulum;
pub mod runner;
