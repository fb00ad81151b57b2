//! Spectral filtering for symmetric linear dynamical systems, and conversion
//! of spectral filters into explicit diagonal recurrences.

pub mod conv;
pub mod distill;
pub mod error;
pub mod io;
pub mod lds;
pub mod linalg;
pub mod rng;
pub mod spectral_basis;
pub mod stu;

pub use distill::{AlphaSampler, DistilledFilters, PairBank, RecurrentStu};
pub use error::{Error, Result};
pub use io::{ArtifactKind, Manifest, Persist};
pub use lds::{DiagonalLds, ImpulseResponse, NoiseSpec};
pub use spectral_basis::{compute_basis, compute_basis_with, EigenConfig, EigenMethod, HankelSpec, SpectralBasis};
pub use stu::{ArTerms, GdConfig, ImpulseFitter, Optimizer, StuParams};
