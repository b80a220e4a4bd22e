//! File formats, threaded drivers and the command-line front end for the
//! shapelab core.

pub mod dataset;
pub mod metricsio;
pub mod parallel;
pub mod reportio;
pub mod runner;
pub mod tensorio;
