//! Expedition & Expansion: open-ended exploration of Flow Lenia.
//!
//! The search alternates novelty-driven expansions (mutate a high-novelty
//! archived solution) with goal-directed expeditions (ask a vision-language
//! model for a textual goal, embed it, and run separable CMA-ES from the
//! nearest archived solution toward it). Behaviors are compared in a semantic
//! embedding space shared by images and text.

pub mod analysis;
pub mod archive;
pub mod behavior;
pub mod cmaes;
pub mod embedding;
pub mod engine;
pub mod genome;
pub mod goals;
pub mod rng;
pub mod simulator;
