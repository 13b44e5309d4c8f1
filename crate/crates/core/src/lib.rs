//! Signed-distance shape models built from many local SDFs.
//!
//! A shape owns one global latent code. A graph network running over the
//! shape's mesh turns that code into one local code per vertex, and every
//! point of space is decoded by the MLP of its nearest vertex in that
//! vertex's local frame. Training combines sign-agnostic distance
//! regression, an eikonal/normal term and a neighbourhood similarity term
//! on the local codes.

pub mod diffcore;
pub mod extract;
pub mod fixtures;
pub mod geometry;
pub mod losses;
pub mod metrics;
pub mod nets;
pub mod regions;
pub mod rng;
pub mod trainer;

pub use diffcore::{DiffError, Graph, ParameterStore, Tensor, Var};
