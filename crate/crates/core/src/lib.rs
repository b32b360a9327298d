//! Planar endoluminal robot navigation: lumen geometry, energy-minimizing
//! chain mechanics, tabular Q-learning and a seeded benchmark harness.

pub mod artifacts;
pub mod cli;
pub mod config;
pub mod env;
pub mod experiments;
pub mod geometry;
pub mod mechanics;
pub mod qlearning;
pub mod render;
