//! Decentralized stochastic approximation over communication graphs with
//! Markovian data.
//!
//! A network of agents jointly finds the root `θ*` of `Σᵢ F̄ᵢ(θ)`, where
//! `F̄ᵢ(θ) = E_{μᵢ}[Fᵢ(X, θ)]` and each agent only sees samples from its own
//! Markov chain. Every iteration mixes neighbours' iterates through a doubly
//! stochastic matrix and takes a local operator step:
//!
//! ```text
//! θᵢᵏ⁺¹ = Σⱼ W(i,j) θⱼᵏ + εₖ Fᵢ(Xᵢᵏ, θᵢᵏ)
//! ```
//!
//! The crate provides the graph and Markov machinery, the operators for
//! decentralized system identification and Q-learning, the iteration with
//! its error metrics and bound checks, and scenario builders plus rate
//! fitting for experiments.

pub mod algorithm;
pub mod config;
pub mod experiments;
pub mod graph;
pub mod markov;
pub mod operators;
pub mod output;
pub mod rng;
