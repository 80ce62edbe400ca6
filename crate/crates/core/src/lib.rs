//! Event-triggered learning-based MPC with symbolic terminal sets built from
//! Gaussian-process models.

pub mod game;
pub mod gp;
pub mod lattice;
pub mod metric;
pub mod symbolic;
pub mod ocp;
pub mod trigger;
pub mod plant;
pub mod closed_loop;
pub mod config;
pub mod run;
pub mod verify;
