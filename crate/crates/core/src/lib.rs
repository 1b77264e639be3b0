//! Finite-element minimisation of second-grade hyperelastic energies with a
//! nonlocal self-contact penalty, discretised with bicubic Hermite (BFS)
//! elements.

pub mod bfs;
pub mod checks;
pub mod diagnostics;
pub mod energy;
pub mod error;
pub mod experiments;
pub mod mesh;
pub mod penalty;
pub mod precond;
pub mod solver;
pub mod state;

pub use bfs::{BfsField, FieldValue, QuadRule, QuadTabulation};
pub use energy::{total_energy, BodyForce, EnergyParams, EnergyTerms, Evaluator, ForceConvention};
pub use error::{Error, Result};
pub use mesh::{DomainSpec, MeshGrid, PincersSpec, Point};
pub use penalty::{energy_cn_accelerated, energy_cn_full, PenaltyEvaluation, PenaltyParams};
pub use state::{Discretization, DeformationState};
