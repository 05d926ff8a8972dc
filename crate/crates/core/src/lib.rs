//! Differentiable entity library for cross-modal entity tracking.
//!
//! The crate is generic over the scalar type ([`Scalar`], implemented for
//! `f32` and `f64`); the aliases at the root fix it to `f64`, which is what
//! the command-line tool and gradient checks use.

pub mod datagen;
pub mod error;
pub mod harness;
pub mod library;
pub mod models;
pub mod numerics;
pub mod scalar;
pub mod training;

pub use error::{Error, Result};
pub use library::{Gate, GateParams, InsertionStep, Library, LibraryDump};
pub use models::{Model, ModelKind, ModelSpec};
pub use numerics::{Matrix, Vector};
pub use scalar::Scalar;

pub type Vector64 = Vector<f64>;
pub type Matrix64 = Matrix<f64>;
pub type Library64 = Library<f64>;
pub type Vector32 = Vector<f32>;
pub type Matrix32 = Matrix<f32>;
pub type Library32 = Library<f32>;
pub type Model64 = Model<f64>;
pub type Model32 = Model<f32>;
