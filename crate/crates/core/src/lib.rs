//! Penalized B-spline model of small-area mortality by age, area and year,
//! fitted with array arithmetic.

pub mod artifact;
pub mod basis;
pub mod commands;
pub mod config;
pub mod data;
pub mod error;
pub mod glam;
pub mod grid;
pub mod inference;
pub mod lifetable;
pub mod linalg;
pub mod penalty;
pub mod simulate;
pub mod solver;
pub mod validate;

pub use error::{Error, Result};
