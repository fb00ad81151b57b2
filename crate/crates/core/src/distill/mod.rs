//! Conversion of spectral filters into diagonal linear dynamical systems.

mod assemble;
mod bank;
mod filters;
mod practical;
mod sampler;
mod spectral;

pub use assemble::{assemble_filter_lds, compose_lds, distill_stu_model, lds_to_lds, LdsDistillation, RecurrentStu};
pub use bank::{build_pair_bank, fit_triple, kernel_error, BankFit, BankRow, PairBank, SystemTriple};
pub use filters::DistilledFilters;
pub use practical::{
    practical_distill, select_rows, FineTuneConfig, PracticalConfig, PracticalDistillation, Selection, SelectionScore,
};
pub use sampler::AlphaSampler;
pub use spectral::{
    coefficient_matrix, distill_with_alphas, find_spectral_representation, lambda_max, spectral_to_lds, RepresentationMode, SgdConfig, SpectralToLds,
};
