//! Deterministic desk-scale harness for text-driven human-scene
//! interaction: a retrieval-backed script planner, kinematic skill
//! executor, reward templates, and evaluation metrics over synthetic 3D
//! scenes.

pub mod cli;
pub mod embedding;
pub mod fsm;
pub mod math;
pub mod metrics;
pub mod planner;
pub mod scene;
pub mod scriptdb;
pub mod skills;
pub mod tasks;
