//! Neural quasi-maximum-likelihood calibration of time-dependent parameters
//! in SDE and heteroscedastic regression models.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autodiff;
pub mod cli;
pub mod evaluate;
pub mod forecast;
pub mod likelihood;
pub mod models;
pub mod neuralnet;
pub mod plot;
pub mod simulate;
pub mod train;
